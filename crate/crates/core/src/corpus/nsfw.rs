use super::record::TripletRecord;
use crate::error::{Error, Result};
use crate::textcore::split_words;

pub const DEFAULT_NSFW_THRESHOLD: f64 = 0.9;

/// Scores a fine prompt in `[0, 1]`; higher is less safe.
pub trait NsfwClassifier {
    fn score(&self, fine_prompt: &str) -> std::result::Result<f64, String>;
}

/// Flags prompts containing any listed keyword.
#[derive(Debug, Clone)]
pub struct KeywordNsfw {
    pub keywords: Vec<String>,
}

impl Default for KeywordNsfw {
    fn default() -> Self {
        Self {
            keywords: ["nsfw", "gore", "nude", "explicit", "gory"].map(String::from).to_vec(),
        }
    }
}

impl NsfwClassifier for KeywordNsfw {
    fn score(&self, fine_prompt: &str) -> std::result::Result<f64, String> {
        let hits = split_words(fine_prompt)
            .iter()
            .filter(|w| self.keywords.iter().any(|k| k == *w))
            .count();
        Ok(if hits == 0 {
            0.0
        } else {
            (0.9 + 0.05 * hits as f64).min(1.0)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quarantined {
    pub record: TripletRecord,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterOutcome {
    pub retained: Vec<TripletRecord>,
    pub removed: Vec<TripletRecord>,
    pub quarantined: Vec<Quarantined>,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("nsfw threshold {threshold} outside (0, 1]")))
    }
}

/// Scores every record, stores the score on it and keeps those strictly
/// below `threshold`. Classifier failures and out-of-range scores are
/// quarantined with a reason.
pub fn filter_nsfw(records: Vec<TripletRecord>, classifier: &dyn NsfwClassifier, threshold: f64) -> Result<FilterOutcome> {
    check_threshold(threshold)?;
    let mut out = FilterOutcome::default();
    for mut record in records {
        match classifier.score(&record.fine_prompt) {
            Ok(score) if (0.0..=1.0).contains(&score) => {
                record.nsfw_score = score;
                if score < threshold {
                    out.retained.push(record);
                } else {
                    out.removed.push(record);
                }
            }
            Ok(score) => out.quarantined.push(Quarantined {
                record,
                reason: format!("classifier returned {score} outside [0, 1]"),
            }),
            Err(reason) => out.quarantined.push(Quarantined { record, reason }),
        }
    }
    Ok(out)
}

/// Re-applies a threshold to the scores already stored on records.
pub fn filter_stored(records: &[TripletRecord], threshold: f64) -> Result<Vec<TripletRecord>> {
    check_threshold(threshold)?;
    Ok(records.iter().filter(|r| r.nsfw_score < threshold).cloned().collect())
}
