use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afem::clip_loss_var;
use crate::autograd::Var;
use crate::corpus::{select_coarse, Bucket, TripletRecord};
use crate::diffusion::{add_noise, squared_error_sum, time_embedding, Latent, NoiseSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Graph;
use crate::raster::Image;
use crate::refiner::decode_teacher_forced_vars;
use crate::seeds::derive_seed;
use crate::textcore::{TokenSequence, Vocabulary};

use super::config::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub sft: f64,
    pub clip: f64,
    pub total: f64,
}

/// `mse + alpha1 * sft + alpha2 * clip`, with disabled terms reported as 0.
pub fn total_loss(mse: f64, sft: f64, clip: f64, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let f = cfg.losses;
    let mse = if f.mse { mse } else { 0.0 };
    let sft = if f.sft { sft } else { 0.0 };
    let clip = if f.clip { clip } else { 0.0 };
    for (name, v) in [("mse", mse), ("sft", sft), ("clip", clip)] {
        if !v.is_finite() {
            return Err(Error::Divergence { component: name.into() });
        }
    }
    let total = mse + cfg.alpha1 * sft + cfg.alpha2 * clip;
    if !total.is_finite() {
        return Err(Error::Divergence { component: "total".into() });
    }
    Ok(LossBreakdown { mse, sft, clip, total })
}

/// Everything one record contributes to a step, drawn from its own stream.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub bucket: Bucket,
    pub coarse: TokenSequence,
    /// `<bos> fine <eos>`, cut to fit the decoder.
    pub target: TokenSequence,
    pub image: Image,
    pub noise: NoiseSample,
    pub z_tau: Latent,
}

/// Seed of the random stream of record `id` in `epoch`.
pub fn record_seed(seed: u64, epoch: usize, id: &str) -> u64 {
    derive_seed(&[&seed.to_le_bytes(), &(epoch as u64).to_le_bytes(), id.as_bytes()])
}

pub fn prepare_example(model: &Model, vocab: &Vocabulary, record: &TripletRecord, image: Image, stream_seed: u64) -> Result<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let (bucket, coarse_text) = select_coarse(record, &mut rng)?;
    let coarse = vocab.tokenize(coarse_text);
    if coarse.is_empty() {
        return Err(Error::RecordIntegrity(format!("record {} has an empty {bucket} prompt", record.id)));
    }
    let mut fine = vocab.tokenize(&record.fine_prompt).ids;
    fine.truncate(model.dims.max_len - 1);
    let target = TokenSequence::framed(&fine);
    let z0 = model.vae_encode(&image)?;
    let noise = NoiseSample::draw(z0.h, z0.w, &model.schedule, &mut rng);
    let z_tau = add_noise(&z0, &noise, &model.schedule)?;
    Ok(Example {
        id: record.id.clone(),
        bucket,
        coarse,
        target,
        image,
        noise,
        z_tau,
    })
}

/// Tape handles of the batch objective.
pub struct ObjectiveVars {
    pub mse: Option<Var>,
    pub sft: Option<Var>,
    pub clip: Option<Var>,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn mean(g: &mut Graph, terms: Vec<Var>) -> Var {
    let n = terms.len() as f64;
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / n)
}

/// Builds the three losses over `examples` on `g`. Disabled terms are not
/// evaluated at all.
pub fn batch_objective(g: &mut Graph, model: &Model, examples: &[Example], cfg: &TrainConfig) -> Result<ObjectiveVars> {
    if examples.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    let flags = cfg.losses;
    let mut sft_terms = Vec::new();
    let mut mse_terms = Vec::new();
    let mut text_rows = Vec::new();
    let mut image_rows = Vec::new();
    for ex in examples {
        let enc = model.text_encoder.forward(g, &ex.coarse)?;
        if flags.sft {
            let memory = model.adapter.forward(g, enc.features);
            let tf = decode_teacher_forced_vars(g, &model.decoder, memory, &enc.mask, &ex.target)?;
            sft_terms.push(g.scale(tf.nll_sum, 1.0 / tf.count as f64));
        }
        if flags.mse {
            let t = g.constant(time_embedding(ex.noise.tau, model.dims.n));
            let psi = g.concat_rows(&[t, enc.features]);
            let z = g.constant(ex.z_tau.values.clone());
            let eps_hat = model.denoiser.forward(g, z, psi, ex.z_tau.h, ex.z_tau.w);
            let sse = squared_error_sum(g, eps_hat, &ex.noise.epsilon.values);
            mse_terms.push(g.scale(sse, 1.0 / ex.noise.epsilon.values.len() as f64));
        }
        if flags.clip {
            text_rows.push(enc.pooled);
            let patches = model.image_encoder.forward(g, &ex.image)?;
            image_rows.push(model.afem.pool(g, patches, cfg.image_pooling));
        }
    }
    let sft = (!sft_terms.is_empty()).then(|| mean(g, sft_terms));
    let mse = (!mse_terms.is_empty()).then(|| mean(g, mse_terms));
    let clip = if flags.clip {
        let t = g.concat_rows(&text_rows);
        let v = g.concat_rows(&image_rows);
        Some(clip_loss_var(g, t, v, cfg.clip)?)
    } else {
        None
    };
    let value = |g: &Graph, v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);
    let breakdown = total_loss(value(g, mse), value(g, sft), value(g, clip), cfg)?;
    let mut parts = Vec::new();
    if let Some(m) = mse {
        parts.push(m);
    }
    if let Some(s) = sft {
        parts.push(g.scale(s, cfg.alpha1));
    }
    if let Some(c) = clip {
        parts.push(g.scale(c, cfg.alpha2));
    }
    let total = match parts.len() {
        0 => g.constant(crate::tensor::Matrix::scalar(0.0)),
        _ => {
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = g.add(acc, p);
            }
            acc
        }
    };
    Ok(ObjectiveVars {
        mse,
        sft,
        clip,
        total,
        breakdown,
    })
}
