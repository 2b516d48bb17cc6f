use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{Bucket, TripletRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratio: f64,
}

/// Seeded uniform train/test assignment. The result depends only on the set
/// of ids, the seed and the ratio; both halves come back sorted.
pub fn split_ids(ids: &[String], seed: u64, ratio: f64) -> Result<CorpusSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio {ratio} outside (0, 1)")));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Split("duplicate record ids".into()));
    }
    if sorted.len() < 2 {
        return Err(Error::Split(format!("need at least 2 records, got {}", sorted.len())));
    }
    let n_train = (ratio * sorted.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let mut test = sorted.split_off(n_train);
    let mut train = sorted;
    train.sort();
    test.sort();
    Ok(CorpusSplit {
        train,
        test,
        seed,
        ratio,
    })
}

pub fn split(records: &[TripletRecord], seed: u64, ratio: f64) -> Result<CorpusSplit> {
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    split_ids(&ids, seed, ratio)
}

/// Picks one of the three coarse prompts uniformly.
pub fn select_coarse<'r, R: Rng + ?Sized>(record: &'r TripletRecord, rng: &mut R) -> Result<(Bucket, &'r str)> {
    for bucket in Bucket::ALL {
        record.coarse(bucket)?;
    }
    let bucket = Bucket::ALL[rng.random_range(0..Bucket::ALL.len())];
    Ok((bucket, record.coarse(bucket)?))
}
