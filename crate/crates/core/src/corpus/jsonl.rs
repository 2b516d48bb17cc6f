use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::record::TripletRecord;
use crate::error::{Error, Result};

const REQUIRED: [&str; 6] = ["id", "fine_prompt", "coarse_prompts", "image_ref", "nsfw_score", "gen_params"];

fn parse_line(line: &str, line_no: usize) -> Result<TripletRecord> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Jsonl {
        line: line_no,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Jsonl {
        line: line_no,
        message: "record is not a JSON object".into(),
    })?;
    if let Some(field) = REQUIRED.iter().find(|f| !obj.contains_key(**f)) {
        return Err(Error::Schema {
            line: line_no,
            field: (*field).to_string(),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Jsonl {
        line: line_no,
        message: e.to_string(),
    })
}

/// Parses JSONL text; blank lines are skipped, line numbers are 1-based.
pub fn parse_jsonl(text: &str) -> Result<Vec<TripletRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn to_jsonl(records: &[TripletRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<TripletRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn store_jsonl(records: &[TripletRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
