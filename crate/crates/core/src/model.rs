//! The full parameter set: text encoder, adapter, decoder, image encoder,
//! dynamic weight network, denoiser and the latent autoencoder stub.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afem::{Afem, ImageEncoder};
use crate::diffusion::{Denoiser, NoiseSchedule, Vae};
use crate::error::{Error, Result};
use crate::nn::{Component, Init, ParamStore};
use crate::refiner::{DomainAdapter, TextDecoder, TextEncoder};

/// How per-token encoder features are reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over real (unpadded) tokens.
    #[default]
    MaskedMean,
    /// Feature of the last real token.
    LastToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Encoder / shared text-image embedding width.
    pub n: usize,
    /// Decoder width.
    pub m: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_ff: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub dec_ff: usize,
    pub max_len: usize,
    #[serde(default)]
    pub pooling: Pooling,
    pub image_size: usize,
    pub patch_size: usize,
    pub img_layers: usize,
    pub img_heads: usize,
    pub img_ff: usize,
    pub afem_hidden: usize,
    pub denoiser_channels: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ModelDims {
    /// Laptop-sized model used by the toy-world pipeline.
    pub fn desk() -> Self {
        Self {
            n: 64,
            m: 64,
            enc_layers: 2,
            enc_heads: 4,
            enc_ff: 128,
            dec_layers: 2,
            dec_heads: 4,
            dec_ff: 128,
            max_len: 48,
            pooling: Pooling::MaskedMean,
            image_size: 32,
            patch_size: 8,
            img_layers: 1,
            img_heads: 4,
            img_ff: 128,
            afem_hidden: 64,
            denoiser_channels: 32,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }

    /// Widths of at most 8, for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            n: 8,
            m: 6,
            enc_layers: 1,
            enc_heads: 2,
            enc_ff: 8,
            dec_layers: 1,
            dec_heads: 2,
            dec_ff: 8,
            max_len: 12,
            pooling: Pooling::MaskedMean,
            image_size: 16,
            patch_size: 8,
            img_layers: 1,
            img_heads: 2,
            img_ff: 8,
            afem_hidden: 8,
            denoiser_channels: 4,
            diffusion_steps: 20,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }

    pub fn adapter_hidden(&self) -> usize {
        self.n.max(self.m)
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / crate::corpus::VAE_DOWNSCALE
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        check(self.n > 0 && self.m > 0, "widths must be positive")?;
        check(self.enc_heads > 0 && self.n.is_multiple_of(self.enc_heads), "n must be divisible by enc_heads")?;
        check(self.dec_heads > 0 && self.m.is_multiple_of(self.dec_heads), "m must be divisible by dec_heads")?;
        check(self.img_heads > 0 && self.n.is_multiple_of(self.img_heads), "n must be divisible by img_heads")?;
        check(self.max_len >= 2, "max_len must be at least 2")?;
        check(
            self.image_size > 0 && self.image_size.is_multiple_of(crate::corpus::VAE_DOWNSCALE),
            "image_size must be a positive multiple of 8",
        )?;
        check(
            self.patch_size > 0 && self.image_size.is_multiple_of(self.patch_size),
            "image_size must be divisible by patch_size",
        )?;
        check(self.diffusion_steps >= 1, "diffusion_steps must be positive")?;
        check(
            0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0,
            "need 0 < beta_start < beta_end < 1",
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub dims: ModelDims,
    pub vocab_size: usize,
    pub seed: u64,
    pub params: ParamStore,
    pub text_encoder: TextEncoder,
    pub adapter: DomainAdapter,
    pub afem: Afem,
    pub decoder: TextDecoder,
    pub image_encoder: ImageEncoder,
    pub denoiser: Denoiser,
    pub vae: Vae,
    pub schedule: NoiseSchedule,
}

impl Model {
    /// Registers and initializes every block from one seeded stream.
    pub fn new(dims: ModelDims, vocab_size: usize, seed: u64) -> Result<Self> {
        dims.validate()?;
        if vocab_size < 5 {
            return Err(Error::Config(format!("vocabulary of {vocab_size} tokens is too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let text_encoder = TextEncoder::new(&mut params, &mut init, &dims, vocab_size);
        let adapter = DomainAdapter::new(&mut params, &mut init, dims.n, dims.adapter_hidden(), dims.m);
        let afem = Afem::new(&mut params, &mut init, dims.n, dims.afem_hidden);
        let decoder = TextDecoder::new(&mut params, &mut init, &dims, vocab_size);
        let image_encoder = ImageEncoder::new(&mut params, &mut init, &dims);
        let denoiser = Denoiser::new(&mut params, &mut init, &dims);
        let vae = Vae::new(&mut params, &mut init);
        let schedule = NoiseSchedule::linear(dims.diffusion_steps, dims.beta_start, dims.beta_end)?;
        Ok(Self {
            dims,
            vocab_size,
            seed,
            params,
            text_encoder,
            adapter,
            afem,
            decoder,
            image_encoder,
            denoiser,
            vae,
            schedule,
        })
    }

    /// Copies every block of `component` from `other` (same architecture).
    pub fn copy_component_from(&mut self, other: &Model, component: Component) -> Result<()> {
        for id in self.params.ids_of(component) {
            let name = self.params.block(id).name.clone();
            let src = other
                .params
                .id(&name)
                .ok_or_else(|| Error::Shape(format!("missing block {name}")))?;
            let value = other.params.value(src).clone();
            if value.shape() != self.params.value(id).shape() {
                return Err(Error::Shape(format!("block {name} shape differs")));
            }
            *self.params.value_mut(id) = value;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = Model::new(ModelDims::tiny(), 12, 3).unwrap();
        let b = Model::new(ModelDims::tiny(), 12, 3).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::new(ModelDims::tiny(), 12, 4).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn every_component_has_parameters() {
        let m = Model::new(ModelDims::tiny(), 12, 3).unwrap();
        for c in Component::ALL {
            assert!(m.params.scalar_count(c) > 0, "{c:?}");
        }
        for b in m.params.blocks() {
            assert!(b.value.is_finite());
        }
    }

    #[test]
    fn invalid_dims_rejected() {
        let mut d = ModelDims::tiny();
        d.enc_heads = 3;
        assert!(Model::new(d, 12, 0).is_err());
        let mut d = ModelDims::tiny();
        d.image_size = 20;
        assert!(d.validate().is_err());
    }
}
