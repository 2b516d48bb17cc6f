use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Distribution of whitespace-word counts over a prompt corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthHistogram {
    pub counts: BTreeMap<usize, usize>,
    pub normalized: BTreeMap<usize, f64>,
}

impl LengthHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// `length,count,probability` rows in ascending length.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,count,probability\n");
        for (len, count) in &self.counts {
            writeln!(out, "{len},{count},{}", self.normalized[len]).unwrap();
        }
        out
    }
}

/// Prompts with no words are skipped.
pub fn length_histogram<S: AsRef<str>>(prompts: &[S]) -> Result<LengthHistogram> {
    if prompts.is_empty() {
        return Err(Error::Histogram("no prompts".into()));
    }
    let mut counts = BTreeMap::new();
    for p in prompts {
        let len = p.as_ref().split_whitespace().count();
        if len > 0 {
            *counts.entry(len).or_insert(0) += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::Histogram("every prompt is empty".into()));
    }
    let normalized = counts
        .iter()
        .map(|(&len, &c)| (len, c as f64 / total as f64))
        .collect();
    Ok(LengthHistogram { counts, normalized })
}
