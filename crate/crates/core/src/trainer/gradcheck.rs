use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_toy_world, render_prompt, toyworld::toy_vocabulary_words};
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::nn::{Component, Graph, ParamStore};
use crate::textcore::Vocabulary;

use super::config::{LossFlags, TrainConfig};
use super::step::{batch_objective, prepare_example, record_seed, Example};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Mse,
    Sft,
    Clip,
}

impl LossName {
    pub const ALL: [LossName; 3] = [LossName::Mse, LossName::Sft, LossName::Clip];

    /// Blocks the loss depends on.
    pub fn components(self) -> &'static [Component] {
        match self {
            LossName::Mse => &[Component::TextEncoder, Component::Denoiser],
            LossName::Sft => &[Component::TextEncoder, Component::Adapter, Component::Decoder],
            LossName::Clip => &[Component::TextEncoder, Component::ImageEncoder, Component::Afem],
        }
    }

    fn flags(self) -> LossFlags {
        LossFlags {
            mse: self == LossName::Mse,
            sft: self == LossName::Sft,
            clip: self == LossName::Clip,
        }
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossName::Mse => "mse",
            LossName::Sft => "sft",
            LossName::Clip => "clip",
        })
    }
}

impl FromStr for LossName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches("l_") {
            "mse" => Ok(LossName::Mse),
            "sft" => Ok(LossName::Sft),
            "clip" => Ok(LossName::Clip),
            _ => Err(Error::Config(format!("unknown loss `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossName,
    pub max_rel_error: f64,
    pub worst_block: String,
    pub scalars: usize,
}

const STEP: f64 = 1e-5;

fn loss_value(params: &ParamStore, model: &Model, examples: &[Example], cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::inference(params);
    let obj = batch_objective(&mut g, model, examples, cfg)?;
    Ok(g.value(obj.total).item())
}

/// Compares tape gradients of one loss against central differences over
/// every scalar of the blocks it depends on.
pub fn grad_check(loss: LossName, dims: &ModelDims, seed: u64) -> Result<GradCheckReport> {
    let vocab = Vocabulary::from_words(toy_vocabulary_words());
    let model = Model::new(dims.clone(), vocab.len(), seed)?;
    let cfg = TrainConfig {
        alpha1: 1.0,
        alpha2: 1.0,
        losses: loss.flags(),
        trainable: loss.components().to_vec(),
        seed,
        ..Default::default()
    };
    let records = generate_toy_world(3, seed)?;
    let examples = records
        .iter()
        .map(|r| {
            let image = render_prompt(&r.fine_prompt, r.gen_params.seed, dims.image_size, dims.image_size);
            prepare_example(&model, &vocab, r, image, record_seed(seed, 0, &r.id))
        })
        .collect::<Result<Vec<_>>>()?;

    let grads = {
        let mut g = Graph::training(&model.params, &cfg.trainable);
        let obj = batch_objective(&mut g, &model, &examples, &cfg)?;
        g.param_grads(obj.total)
    };

    let mut report = GradCheckReport {
        loss,
        max_rel_error: 0.0,
        worst_block: String::new(),
        scalars: 0,
    };
    let mut params = model.params.clone();
    for id in model.params.ids() {
        if !cfg.is_trainable(model.params.block(id).component) {
            continue;
        }
        for k in 0..model.params.value(id).len() {
            let orig = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = orig + STEP;
            let up = loss_value(&params, &model, &examples, &cfg)?;
            params.value_mut(id).data_mut()[k] = orig - STEP;
            let down = loss_value(&params, &model, &examples, &cfg)?;
            params.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads[id.0].as_ref().map(|g| g.data()[k]).unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_block = model.params.block(id).name.clone();
            }
            report.scalars += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        for l in LossName::ALL {
            assert_eq!(l.to_string().parse::<LossName>().unwrap(), l);
        }
        assert_eq!("L_clip".parse::<LossName>().unwrap(), LossName::Clip);
    }
}
