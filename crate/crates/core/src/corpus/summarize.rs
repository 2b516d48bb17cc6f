use std::collections::BTreeMap;

use super::record::Bucket;
use crate::error::{Error, Result};
use crate::textcore::{join_words, split_words};

/// Produces a coarse prompt of the requested bucket from a fine prompt.
pub trait Summarizer {
    fn summarize(&self, fine_prompt: &str, bucket: Bucket) -> Result<String>;
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "with", "and", "by", "for", "to", "from", "is", "are",
    "its", "into", "over", "under", "very", "as", "or", "this", "that", "it", "be",
];

fn is_content(word: &str) -> bool {
    word.chars().any(char::is_alphanumeric) && !STOP_WORDS.contains(&word)
}

/// Keeps content words in document order up to the bucket cap. Prompts that
/// already fit under the cap are returned unchanged; when too few content
/// words exist, the earliest remaining tokens are restored to reach the floor.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractiveSummarizer;

impl Summarizer for ExtractiveSummarizer {
    fn summarize(&self, fine_prompt: &str, bucket: Bucket) -> Result<String> {
        let words = split_words(fine_prompt);
        if words.is_empty() {
            return Err(Error::RejectedRecord("fine prompt is empty after tokenization".into()));
        }
        if words.len() <= bucket.cap() {
            return Ok(join_words(&words));
        }
        let mut keep = vec![false; words.len()];
        let mut kept = 0;
        for (i, w) in words.iter().enumerate() {
            if kept == bucket.cap() {
                break;
            }
            if is_content(w) {
                keep[i] = true;
                kept += 1;
            }
        }
        for flag in keep.iter_mut() {
            if kept >= bucket.floor() {
                break;
            }
            if !*flag {
                *flag = true;
                kept += 1;
            }
        }
        let chosen: Vec<&String> = words.iter().zip(&keep).filter(|(_, k)| **k).map(|(w, _)| w).collect();
        Ok(join_words(&chosen))
    }
}

/// Summarizes into all three buckets and checks each result's token count.
pub fn summarize_to_buckets(fine_prompt: &str, summarizer: &dyn Summarizer) -> Result<BTreeMap<Bucket, String>> {
    let fine_len = split_words(fine_prompt).len();
    if fine_len == 0 {
        return Err(Error::RejectedRecord("fine prompt is empty after tokenization".into()));
    }
    let mut out = BTreeMap::new();
    for bucket in Bucket::ALL {
        let text = summarizer.summarize(fine_prompt, bucket)?;
        let len = split_words(&text).len();
        let floor = bucket.floor().min(fine_len);
        if len < floor || len > bucket.cap() {
            return Err(Error::RejectedRecord(format!(
                "summarizer produced {len} tokens for the {bucket} bucket"
            )));
        }
        out.insert(bucket, text);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcore::token_count;

    const FINE: &str = "a green tree on a hill at sunset, watercolor painting, highly detailed, sharp focus, trending on artstation";

    #[test]
    fn twenty_token_prompt_medium_bucket_in_range() {
        assert!(token_count(FINE) >= 20);
        let b = summarize_to_buckets(FINE, &ExtractiveSummarizer).unwrap();
        let medium = token_count(&b[&Bucket::Medium]);
        assert!((6..=10).contains(&medium), "{medium}");
        assert!((1..=5).contains(&token_count(&b[&Bucket::Short])));
        assert!((11..=15).contains(&token_count(&b[&Bucket::Long])));
        assert_eq!(b[&Bucket::Short], "green tree hill sunset watercolor");
    }

    #[test]
    fn short_prompt_fills_every_bucket() {
        let b = summarize_to_buckets("green tree painting", &ExtractiveSummarizer).unwrap();
        for bucket in Bucket::ALL {
            assert_eq!(b[&bucket], "green tree painting");
        }
    }

    #[test]
    fn deterministic() {
        let a = summarize_to_buckets(FINE, &ExtractiveSummarizer).unwrap();
        let b = summarize_to_buckets(FINE, &ExtractiveSummarizer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stop_word_heavy_prompt_backfills_to_floor() {
        let fine = "a tree in the park of the city by the sea, at the end of the road";
        let b = summarize_to_buckets(fine, &ExtractiveSummarizer).unwrap();
        for bucket in Bucket::ALL {
            let n = token_count(&b[&bucket]);
            assert!(n >= bucket.floor() && n <= bucket.cap(), "{bucket}: {n}");
        }
    }

    #[test]
    fn empty_prompt_rejected() {
        assert!(matches!(
            summarize_to_buckets("   ", &ExtractiveSummarizer),
            Err(Error::RejectedRecord(_))
        ));
    }

    struct Overlong;
    impl Summarizer for Overlong {
        fn summarize(&self, fine: &str, _: Bucket) -> Result<String> {
            Ok(fine.to_string())
        }
    }

    #[test]
    fn plugin_output_is_checked() {
        assert!(summarize_to_buckets(FINE, &Overlong).is_err());
    }
}
