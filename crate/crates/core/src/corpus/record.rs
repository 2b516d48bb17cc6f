use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coarse prompt length bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Short,
    Medium,
    Long,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Short, Bucket::Medium, Bucket::Long];

    /// Minimum token count (inclusive).
    pub fn floor(self) -> usize {
        match self {
            Bucket::Short => 1,
            Bucket::Medium => 6,
            Bucket::Long => 11,
        }
    }

    /// Maximum token count (inclusive).
    pub fn cap(self) -> usize {
        match self {
            Bucket::Short => 5,
            Bucket::Medium => 10,
            Bucket::Long => 15,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Short => "short",
            Bucket::Medium => "medium",
            Bucket::Long => "long",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Bucket {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Bucket::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown bucket `{s}`"))
    }
}

pub const VAE_DOWNSCALE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub step: u32,
    pub seed: u64,
    pub height: u32,
    pub width: u32,
    pub cfg_scale: f64,
    pub sampler: String,
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if self.step == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::RecordIntegrity(
                "step, height and width must be positive".into(),
            ));
        }
        if !(self.height as usize).is_multiple_of(VAE_DOWNSCALE) || !(self.width as usize).is_multiple_of(VAE_DOWNSCALE) {
            return Err(Error::RecordIntegrity(format!(
                "image size {}x{} not divisible by {VAE_DOWNSCALE}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// One coarse/fine/image instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub fine_prompt: String,
    pub coarse_prompts: BTreeMap<Bucket, String>,
    pub image_ref: String,
    pub nsfw_score: f64,
    pub gen_params: GenerationParams,
    /// Fields this crate does not know about, kept for round trips.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl TripletRecord {
    pub fn coarse(&self, bucket: Bucket) -> Result<&str> {
        self.coarse_prompts
            .get(&bucket)
            .map(String::as_str)
            .ok_or_else(|| Error::RecordIntegrity(format!("record {} has no {bucket} coarse prompt", self.id)))
    }

    /// Bucket bounds, score range and generation parameters.
    pub fn validate(&self) -> Result<()> {
        let fine_len = crate::textcore::token_count(&self.fine_prompt);
        for bucket in Bucket::ALL {
            let len = crate::textcore::token_count(self.coarse(bucket)?);
            if len > bucket.cap() || (fine_len >= bucket.floor() && len < bucket.floor()) {
                return Err(Error::RecordIntegrity(format!(
                    "record {}: {bucket} prompt has {len} tokens",
                    self.id
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.nsfw_score) {
            return Err(Error::RecordIntegrity(format!(
                "record {}: nsfw score {} outside [0, 1]",
                self.id, self.nsfw_score
            )));
        }
        self.gen_params.validate()
    }
}
