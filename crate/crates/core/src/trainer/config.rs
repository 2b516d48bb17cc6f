use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::afem::{ClipConfig, ImagePooling};
use crate::error::{Error, Result};
use crate::nn::Component;

/// Which loss terms contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub mse: bool,
    pub sft: bool,
    pub clip: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Ablation::Full.flags()
    }
}

/// Named loss-component configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    WithoutMse,
    WithoutClip,
    WithoutMseClip,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::WithoutMse, Ablation::WithoutClip, Ablation::WithoutMseClip, Ablation::Full];

    pub fn flags(self) -> LossFlags {
        let (mse, clip) = match self {
            Ablation::Full => (true, true),
            Ablation::WithoutMse => (false, true),
            Ablation::WithoutClip => (true, false),
            Ablation::WithoutMseClip => (false, false),
        };
        LossFlags { mse, sft: true, clip }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutMse => "wo L_mse",
            Ablation::WithoutClip => "wo L_clip",
            Ablation::WithoutMseClip => "wo L_mse,clip",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| if c == '-' { '_' } else { c })
            .collect();
        match key.as_str() {
            "full" => Ok(Ablation::Full),
            "wol_mse" | "wo_mse" | "womse" => Ok(Ablation::WithoutMse),
            "wol_clip" | "wo_clip" | "woclip" => Ok(Ablation::WithoutClip),
            "wol_mse,clip" | "wo_mse_clip" | "womse,clip" => Ok(Ablation::WithoutMseClip),
            _ => Err(Error::Config(format!("unknown ablation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub trainable: Vec<Component>,
    pub losses: LossFlags,
    pub clip: ClipConfig,
    pub image_pooling: ImagePooling,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.1,
            alpha2: 0.1,
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            trainable: vec![Component::TextEncoder, Component::Adapter, Component::Afem],
            losses: LossFlags::default(),
            clip: ClipConfig::default(),
            image_pooling: ImagePooling::Adaptive,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.losses = ablation.flags();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) || !self.alpha1.is_finite() || !self.alpha2.is_finite() {
            return Err(Error::Config("alphas must be finite and non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.clip.temperature > 0.0) {
            return Err(Error::Config("clip temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn is_trainable(&self, c: Component) -> bool {
        self.trainable.contains(&c)
    }
}
