//! Coarse/fine prompt triplet datasets: construction, filtering, splitting,
//! storage and length analysis, plus the synthetic toy world.

mod histogram;
mod jsonl;
mod nsfw;
mod record;
mod split;
mod summarize;
pub mod toyworld;

pub use histogram::{length_histogram, LengthHistogram};
pub use jsonl::{load_jsonl, parse_jsonl, store_jsonl, to_jsonl};
pub use nsfw::{filter_nsfw, filter_stored, FilterOutcome, KeywordNsfw, NsfwClassifier, Quarantined, DEFAULT_NSFW_THRESHOLD};
pub use record::{Bucket, GenerationParams, TripletRecord, VAE_DOWNSCALE};
pub use split::{select_coarse, split, split_ids, CorpusSplit};
pub use summarize::{summarize_to_buckets, ExtractiveSummarizer, Summarizer};
pub use toyworld::{generate_toy_world, render_prompt, resolve_image};
