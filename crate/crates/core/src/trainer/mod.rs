//! Composite objective, optimizer loop, checkpoints and gradient checks.

mod checkpoint;
mod config;
mod gradcheck;
mod optim;
mod step;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::{Ablation, AdamWConfig, LossFlags, TrainConfig};
pub use gradcheck::{grad_check, GradCheckReport, LossName};
pub use optim::AdamW;
pub use step::{batch_objective, prepare_example, record_seed, total_loss, Example, LossBreakdown, ObjectiveVars};

use crate::corpus::{resolve_image, TripletRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Component, Graph};
use crate::raster::Image;
use crate::seeds::seed_of;
use crate::textcore::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// `epoch,mse,sft,clip,total` rows.
pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,mse,sft,clip,total\n");
    for e in curve {
        let l = e.loss;
        writeln!(out, "{},{},{},{},{}", e.epoch, l.mse, l.sft, l.clip, l.total).unwrap();
    }
    out
}

/// Model, optimizer and data plumbing for one training run.
pub struct Trainer {
    pub model: Model,
    pub vocab: Vocabulary,
    pub cfg: TrainConfig,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    image_base: Option<PathBuf>,
    images: HashMap<String, Image>,
}

impl Trainer {
    pub fn new(model: Model, vocab: Vocabulary, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if vocab.len() != model.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.vocab_size
            )));
        }
        let optimizer = AdamW::new(cfg.optimizer, model.params.len());
        Ok(Self {
            model,
            vocab,
            cfg,
            optimizer,
            epoch: 0,
            image_base: None,
            images: HashMap::new(),
        })
    }

    /// Fresh model initialized from `cfg.seed`.
    pub fn from_scratch(dims: crate::model::ModelDims, vocab: Vocabulary, cfg: TrainConfig) -> Result<Self> {
        let model = Model::new(dims, vocab.len(), cfg.seed)?;
        Self::new(model, vocab, cfg)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.model, ckpt.vocab, ckpt.config)?;
        if let Some(opt) = ckpt.optimizer {
            t.optimizer = opt;
        }
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            config: self.cfg.clone(),
            epoch: self.epoch,
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Directory that relative `image_ref`s resolve against.
    pub fn set_image_base(&mut self, base: impl Into<PathBuf>) {
        self.image_base = Some(base.into());
    }

    fn image(&mut self, record: &TripletRecord) -> Result<Image> {
        if let Some(img) = self.images.get(&record.id) {
            return Ok(img.clone());
        }
        let img = resolve_image(record, self.image_base.as_deref())?;
        self.images.insert(record.id.clone(), img.clone());
        Ok(img)
    }

    pub fn examples(&mut self, batch: &[TripletRecord]) -> Result<Vec<Example>> {
        batch
            .iter()
            .map(|r| {
                r.validate()?;
                let image = self.image(r)?;
                prepare_example(&self.model, &self.vocab, r, image, record_seed(self.cfg.seed, self.epoch, &r.id))
            })
            .collect()
    }

    /// Losses on `batch` without touching parameters.
    pub fn evaluate(&mut self, batch: &[TripletRecord]) -> Result<LossBreakdown> {
        let examples = self.examples(batch)?;
        let mut g = Graph::inference(&self.model.params);
        Ok(batch_objective(&mut g, &self.model, &examples, &self.cfg)?.breakdown)
    }

    /// One optimizer update on `batch` (which must hold `batch_size` records).
    pub fn train_step(&mut self, batch: &[TripletRecord]) -> Result<LossBreakdown> {
        if batch.len() != self.cfg.batch_size {
            return Err(Error::Config(format!(
                "batch of {} records, batch_size is {}",
                batch.len(),
                self.cfg.batch_size
            )));
        }
        let examples = self.examples(batch)?;
        let (breakdown, grads) = {
            let mut g = Graph::training(&self.model.params, &self.cfg.trainable);
            let obj = batch_objective(&mut g, &self.model, &examples, &self.cfg)?;
            (obj.breakdown, g.param_grads(obj.total))
        };
        for (i, grad) in grads.iter().enumerate() {
            if grad.as_ref().is_some_and(|m| !m.is_finite()) {
                let name = &self.model.params.blocks()[i].name;
                return Err(Error::Divergence {
                    component: format!("gradient of {name}"),
                });
            }
        }
        self.optimizer.update(&mut self.model.params, &grads, self.cfg.learning_rate);
        Ok(breakdown)
    }

    /// Shuffles `records` with the epoch seed and steps over full batches.
    /// Returns the mean breakdown of the epoch.
    pub fn run_epoch(&mut self, records: &[TripletRecord]) -> Result<LossBreakdown> {
        let b = self.cfg.batch_size;
        if records.len() < b {
            return Err(Error::Config(format!(
                "{} training records cannot fill a batch of {b}",
                records.len()
            )));
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_of(self.cfg.seed, self.epoch as u64, 0)));
        let mut sums = [0.0; 3];
        let mut steps = 0;
        for chunk in order.chunks_exact(b) {
            let batch: Vec<TripletRecord> = chunk.iter().map(|&i| records[i].clone()).collect();
            let l = self.train_step(&batch)?;
            sums[0] += l.mse;
            sums[1] += l.sft;
            sums[2] += l.clip;
            steps += 1;
        }
        self.epoch += 1;
        let n = steps as f64;
        total_loss(sums[0] / n, sums[1] / n, sums[2] / n, &self.cfg)
    }

    /// Runs the remaining epochs up to `cfg.epochs`.
    pub fn fit(&mut self, records: &[TripletRecord]) -> Result<Vec<EpochLoss>> {
        self.fit_with(records, |_| {})
    }

    /// Like [`Trainer::fit`], calling `on_epoch` after every epoch.
    pub fn fit_with(&mut self, records: &[TripletRecord], mut on_epoch: impl FnMut(&EpochLoss)) -> Result<Vec<EpochLoss>> {
        if records.is_empty() {
            return Err(Error::Config("empty training corpus".into()));
        }
        let mut curve = Vec::new();
        while self.epoch < self.cfg.epochs {
            let loss = self.run_epoch(records)?;
            let e = EpochLoss { epoch: self.epoch, loss };
            log::info!(
                "epoch {} mse {:.4} sft {:.4} clip {:.4} total {:.4}",
                e.epoch,
                loss.mse,
                loss.sft,
                loss.clip,
                loss.total
            );
            on_epoch(&e);
            curve.push(e);
        }
        Ok(curve)
    }
}

/// Trains a fresh model on `records` and returns the final checkpoint with
/// the per-epoch loss curve.
pub fn fit(
    records: &[TripletRecord],
    dims: crate::model::ModelDims,
    vocab: Vocabulary,
    cfg: TrainConfig,
) -> Result<(Checkpoint, Vec<EpochLoss>)> {
    let mut t = Trainer::from_scratch(dims, vocab, cfg)?;
    let curve = t.fit(records)?;
    Ok((t.checkpoint(), curve))
}

/// Desk-scale stand-in for pretrained foundation weights. Trains every block
/// except the VAE jointly on `records`, then re-initializes the adapter and
/// the AFEM, which fine-tuning learns from scratch.
pub fn pretrain_foundation(
    records: &[TripletRecord],
    dims: crate::model::ModelDims,
    vocab: Vocabulary,
    seed: u64,
    epochs: usize,
    learning_rate: f64,
) -> Result<Model> {
    let cfg = TrainConfig {
        epochs,
        learning_rate,
        seed,
        trainable: Component::ALL.into_iter().filter(|&c| c != Component::Vae).collect(),
        ..Default::default()
    };
    let mut t = Trainer::from_scratch(dims.clone(), vocab, cfg)?;
    t.fit(records)?;
    let fresh = Model::new(dims, t.model.vocab_size, seed)?;
    t.model.copy_component_from(&fresh, Component::Adapter)?;
    t.model.copy_component_from(&fresh, Component::Afem)?;
    Ok(t.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_toy_world;
    use crate::model::ModelDims;

    fn small_dims() -> ModelDims {
        ModelDims {
            image_size: 32,
            ..ModelDims::tiny()
        }
    }

    fn setup(cfg: TrainConfig) -> (Trainer, Vec<TripletRecord>) {
        let records = generate_toy_world(8, 3).unwrap();
        let vocab = Vocabulary::from_texts(records.iter().map(|r| r.fine_prompt.as_str()));
        (Trainer::from_scratch(small_dims(), vocab, cfg).unwrap(), records)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            learning_rate: 1e-3,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_blocks_stay_put() {
        let (mut t, records) = setup(cfg());
        let before = t.model.params.clone();
        t.train_step(&records[..4]).unwrap();
        for (a, b) in before.blocks().iter().zip(t.model.params.blocks()) {
            let trainable = t.cfg.is_trainable(a.component);
            assert_eq!(a.value == b.value, !trainable, "{}", a.name);
        }
    }

    #[test]
    fn empty_trainable_set_reports_losses() {
        let (mut t, records) = setup(TrainConfig { trainable: vec![], ..cfg() });
        let before = t.model.params.clone();
        let l = t.train_step(&records[..4]).unwrap();
        assert!(l.total.is_finite() && l.total > 0.0);
        assert_eq!(before, t.model.params);
    }

    #[test]
    fn same_seed_same_breakdown() {
        let (mut a, records) = setup(cfg());
        let (mut b, _) = setup(cfg());
        assert_eq!(a.train_step(&records[..4]).unwrap(), b.train_step(&records[..4]).unwrap());
    }

    #[test]
    fn batch_size_enforced() {
        let (mut t, records) = setup(cfg());
        assert!(matches!(t.train_step(&records[..3]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let (mut t, records) = setup(TrainConfig { epochs: 0, ..cfg() });
        let init = t.model.params.clone();
        assert!(t.fit(&records).unwrap().is_empty());
        assert_eq!(t.checkpoint().model.params, init);
        assert!(t.fit(&[]).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (mut full, records) = setup(cfg());
        full.fit(&records).unwrap();
        let (mut half, _) = setup(TrainConfig { epochs: 1, ..cfg() });
        half.fit(&records).unwrap();
        let bytes = half.checkpoint().to_bytes().unwrap();
        let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
        ck.config.epochs = 2;
        let mut resumed = Trainer::from_checkpoint(ck).unwrap();
        resumed.fit(&records).unwrap();
        assert_eq!(resumed.model.params, full.model.params);
        assert_eq!(resumed.optimizer, full.optimizer);
    }

    #[test]
    fn curve_csv_layout() {
        let l = LossBreakdown { mse: 1.0, sft: 2.0, clip: 3.0, total: 1.5 };
        let csv = loss_curve_csv(&[EpochLoss { epoch: 1, loss: l }]);
        assert_eq!(csv, "epoch,mse,sft,clip,total\n1,1,2,3,1.5\n");
    }

    #[test]
    fn decoder_can_be_unfrozen() {
        let (mut t, records) = setup(TrainConfig {
            trainable: vec![Component::Decoder],
            ..cfg()
        });
        let before = t.model.params.clone();
        t.train_step(&records[..4]).unwrap();
        let dec = before.ids_of(Component::Decoder)[0];
        assert_ne!(before.value(dec), t.model.params.value(dec));
    }
}
