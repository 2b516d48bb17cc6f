//! Builds a toy-world corpus: generation, NSFW filtering, split, length
//! histograms and a JSONL round trip.
//!
//! `cargo run --example build_corpus -- [records] [out_dir]`

use finegrain::corpus::{
    filter_nsfw, generate_toy_world, length_histogram, load_jsonl, split, store_jsonl, Bucket, KeywordNsfw,
    DEFAULT_NSFW_THRESHOLD,
};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let out = std::path::PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "target/toy-corpus".into()));
    std::fs::create_dir_all(&out)?;

    let records = generate_toy_world(n, 1)?;
    let outcome = filter_nsfw(records, &KeywordNsfw::default(), DEFAULT_NSFW_THRESHOLD)?;
    println!("{} retained, {} removed by the NSFW filter", outcome.retained.len(), outcome.removed.len());

    let s = split(&outcome.retained, 1, 0.9)?;
    println!("train {} / test {}", s.train.len(), s.test.len());

    let r = &outcome.retained[0];
    println!("\nfine:   {}", r.fine_prompt);
    for b in Bucket::ALL {
        println!("{:<7} {}", format!("{}:", b.as_str()), r.coarse(b)?);
    }

    let fine: Vec<&str> = outcome.retained.iter().map(|r| r.fine_prompt.as_str()).collect();
    let short: Vec<&str> = outcome.retained.iter().map(|r| r.coarse(Bucket::Short)).collect::<Result<_, _>>()?;
    println!("\nfine prompt lengths:\n{}", length_histogram(&fine)?.to_csv());
    println!("short coarse prompt lengths:\n{}", length_histogram(&short)?.to_csv());

    let path = out.join("corpus.jsonl");
    store_jsonl(&outcome.retained, &path)?;
    assert_eq!(load_jsonl(&path)?, outcome.retained);
    println!("wrote {}", path.display());
    Ok(())
}
