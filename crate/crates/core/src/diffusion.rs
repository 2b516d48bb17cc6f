//! Latent diffusion branch: autoencoder stub, noise schedule, the
//! text-conditioned noise predictor and its MSE objective.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::Var;
use crate::corpus::VAE_DOWNSCALE;
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::nn::{Attention, Component, Graph, Init, Linear, ParamId, ParamStore};
use crate::raster::Image;
use crate::tensor::Matrix;

pub const LATENT_CHANNELS: usize = 4;
/// Multiplier applied after projecting a patch into latent space.
pub const LATENT_SCALE: f64 = 0.25;

/// A `channels x h x w` latent stored position-major: row `y * w + x`
/// holds the channel vector of one latent pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub h: usize,
    pub w: usize,
    pub values: Matrix,
}

impl Latent {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: Matrix::zeros(h * w, LATENT_CHANNELS),
        }
    }

    pub fn gaussian<R: Rng>(h: usize, w: usize, rng: &mut R) -> Self {
        let data = (0..h * w * LATENT_CHANNELS).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            h,
            w,
            values: Matrix::from_vec(h * w, LATENT_CHANNELS, data),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (LATENT_CHANNELS, self.h, self.w)
    }
}

/// Fixed linear patch projection. Columns of `proj` are orthonormal, so
/// `encode(decode(z)) == z` for every latent and `decode(encode(x)) == x`
/// for every image in the decoder's range.
#[derive(Debug, Clone)]
pub struct Vae {
    pub proj: ParamId,
}

const PATCH_DIM: usize = VAE_DOWNSCALE * VAE_DOWNSCALE * Image::CHANNELS;

impl Vae {
    pub fn new(store: &mut ParamStore, init: &mut Init) -> Self {
        // Per-channel patch means first, then one seeded direction.
        let mut cols: Vec<Vec<f64>> = (0..3)
            .map(|c| (0..PATCH_DIM).map(|k| if k % 3 == c { 1.0 } else { 0.0 }).collect())
            .collect();
        cols.push(init.uniform(1, PATCH_DIM, 1.0).into_vec());
        for i in 0..cols.len() {
            for j in 0..i {
                let d: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let prev = cols[j].clone();
                for (x, p) in cols[i].iter_mut().zip(prev) {
                    *x -= d * p;
                }
            }
            let n = cols[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            cols[i].iter_mut().for_each(|x| *x /= n);
        }
        let mut proj = Matrix::zeros(PATCH_DIM, LATENT_CHANNELS);
        for (c, col) in cols.iter().enumerate() {
            for (k, &v) in col.iter().enumerate() {
                proj.set(k, c, v);
            }
        }
        Self {
            proj: store.register("vae.proj", Component::Vae, proj),
        }
    }

    fn check(image_h: usize, image_w: usize) -> Result<()> {
        if image_h == 0 || image_w == 0 || !image_h.is_multiple_of(VAE_DOWNSCALE) || !image_w.is_multiple_of(VAE_DOWNSCALE) {
            return Err(Error::Shape(format!(
                "image {image_h}x{image_w} is not divisible by {VAE_DOWNSCALE}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, params: &ParamStore, image: &Image) -> Result<Latent> {
        Self::check(image.height(), image.width())?;
        let (h, w) = (image.height() / VAE_DOWNSCALE, image.width() / VAE_DOWNSCALE);
        let mut patches = Matrix::zeros(h * w, PATCH_DIM);
        for ly in 0..h {
            for lx in 0..w {
                let row = patches.row_mut(ly * w + lx);
                for py in 0..VAE_DOWNSCALE {
                    for px in 0..VAE_DOWNSCALE {
                        let p = image.pixel(ly * VAE_DOWNSCALE + py, lx * VAE_DOWNSCALE + px);
                        let k = (py * VAE_DOWNSCALE + px) * 3;
                        row[k..k + 3].copy_from_slice(&p);
                    }
                }
            }
        }
        let values = patches.matmul(params.value(self.proj)).scale(LATENT_SCALE);
        Ok(Latent { h, w, values })
    }

    pub fn decode(&self, params: &ParamStore, latent: &Latent) -> Image {
        let patches = latent.values.matmul_t(params.value(self.proj)).scale(1.0 / LATENT_SCALE);
        let mut image = Image::new(latent.h * VAE_DOWNSCALE, latent.w * VAE_DOWNSCALE);
        for ly in 0..latent.h {
            for lx in 0..latent.w {
                let row = patches.row(ly * latent.w + lx);
                for py in 0..VAE_DOWNSCALE {
                    for px in 0..VAE_DOWNSCALE {
                        let k = (py * VAE_DOWNSCALE + px) * 3;
                        image.set_pixel(ly * VAE_DOWNSCALE + py, lx * VAE_DOWNSCALE + px, [row[k], row[k + 1], row[k + 2]]);
                    }
                }
            }
        }
        image
    }
}

/// Forward-process variances and their cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` (step 1) to `beta_end` (step T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule: {steps} steps, betas {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_tau` for `tau` in `1..=T`.
    pub fn beta(&self, tau: usize) -> f64 {
        self.betas[tau - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bars[tau]
    }

    pub fn check_tau(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.steps() {
            return Err(Error::TauOutOfRange {
                tau,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub epsilon: Latent,
    pub tau: usize,
}

impl NoiseSample {
    pub fn draw<R: Rng>(h: usize, w: usize, schedule: &NoiseSchedule, rng: &mut R) -> Self {
        let tau = rng.random_range(1..=schedule.steps());
        Self {
            epsilon: Latent::gaussian(h, w, rng),
            tau,
        }
    }
}

/// `sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps`
pub fn add_noise_at(z0: &Latent, epsilon: &Latent, alpha_bar: f64) -> Result<Latent> {
    if z0.values.shape() != epsilon.values.shape() {
        return Err(Error::Shape("noise and latent shapes differ".into()));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(Latent {
        h: z0.h,
        w: z0.w,
        values: z0.values.zip_map(&epsilon.values, |z, e| a * z + b * e),
    })
}

pub fn add_noise(z0: &Latent, sample: &NoiseSample, schedule: &NoiseSchedule) -> Result<Latent> {
    schedule.check_tau(sample.tau)?;
    add_noise_at(z0, &sample.epsilon, schedule.alpha_bar(sample.tau))
}

/// Sinusoidal embedding of the diffusion step, `1 x width`.
pub fn time_embedding(tau: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(1, width);
    let half = width / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half.max(1) as f64);
        out.set(0, 2 * i, (tau as f64 * freq).sin());
        out.set(0, 2 * i + 1, (tau as f64 * freq).cos());
    }
    out
}

/// Spatial input (noised latent) plus attention conditioning
/// `[time embedding; text features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConditioning {
    pub gamma: Latent,
    pub psi: Matrix,
    pub tau: usize,
}

impl DiffusionConditioning {
    pub fn new(gamma: Latent, tau: usize, text_features: &Matrix) -> Self {
        let t = time_embedding(tau, text_features.cols());
        Self {
            gamma,
            psi: Matrix::vstack(&[&t, text_features]),
            tau,
        }
    }
}

/// 3x3 convolution (padding 1) as a gather into `positions x 9*channels`.
fn im2col_index(h: usize, w: usize, channels: usize, stride: usize) -> (usize, usize, Rc<Vec<Option<usize>>>) {
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut index = Vec::with_capacity(oh * ow * 9 * channels);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..3 {
                for kx in 0..3 {
                    let y = (oy * stride + ky) as isize - 1;
                    let x = (ox * stride + kx) as isize - 1;
                    for c in 0..channels {
                        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            index.push(None);
                        } else {
                            index.push(Some((y as usize * w + x as usize) * channels + c));
                        }
                    }
                }
            }
        }
    }
    (oh, ow, Rc::new(index))
}

/// Nearest-neighbour upsampling from `(sh, sw)` to `(h, w)`.
fn upsample_index(sh: usize, sw: usize, h: usize, w: usize, channels: usize) -> Rc<Vec<Option<usize>>> {
    let mut index = Vec::with_capacity(h * w * channels);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = ((y * sh / h).min(sh - 1), (x * sw / w).min(sw - 1));
            for c in 0..channels {
                index.push(Some((sy * sw + sx) * channels + c));
            }
        }
    }
    Rc::new(index)
}

#[derive(Debug, Clone)]
struct Conv3x3 {
    lin: Linear,
    stride: usize,
    in_channels: usize,
}

impl Conv3x3 {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            lin: Linear::new(store, init, name, Component::Denoiser, 9 * cin, cout),
            stride,
            in_channels: cin,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let (oh, ow, index) = im2col_index(h, w, self.in_channels, self.stride);
        let cols = g.gather(x, oh * ow, 9 * self.in_channels, index);
        (self.lin.forward(g, cols), oh, ow)
    }
}

/// Small encoder-decoder over latents with cross-attention to the
/// conditioning sequence at both resolutions.
#[derive(Debug, Clone)]
pub struct Denoiser {
    conv_in: Conv3x3,
    down: Conv3x3,
    cross_low: Attention,
    cross_high: Attention,
    conv_mid: Conv3x3,
    conv_out: Conv3x3,
    channels: usize,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, init: &mut Init, dims: &ModelDims) -> Self {
        let c = dims.denoiser_channels;
        let comp = Component::Denoiser;
        Self {
            conv_in: Conv3x3::new(store, init, "denoiser.conv_in", LATENT_CHANNELS, c, 1),
            down: Conv3x3::new(store, init, "denoiser.down", c, c, 2),
            cross_low: Attention::new(store, init, "denoiser.cross_low", comp, c, dims.n, dims.n, 1),
            cross_high: Attention::new(store, init, "denoiser.cross_high", comp, c, dims.n, dims.n, 1),
            conv_mid: Conv3x3::new(store, init, "denoiser.conv_mid", c, c, 1),
            conv_out: Conv3x3::new(store, init, "denoiser.conv_out", c, LATENT_CHANNELS, 1),
            channels: c,
        }
    }

    /// `z_tau` is `(h*w) x 4`, `psi` is `rows x n`; returns `(h*w) x 4`.
    pub fn forward(&self, g: &mut Graph, z_tau: Var, psi: Var, h: usize, w: usize) -> Var {
        let (x, _, _) = self.conv_in.forward(g, z_tau, h, w);
        let skip = g.gelu(x);
        let (d, dh, dw) = self.down.forward(g, skip, h, w);
        let d = g.gelu(d);
        let a = self.cross_low.forward(g, d, psi, None);
        let d = g.add(d, a);
        let up = g.gather(d, h * w, self.channels, upsample_index(dh, dw, h, w, self.channels));
        let u = g.add(up, skip);
        let a = self.cross_high.forward(g, u, psi, None);
        let u = g.add(u, a);
        let (m, _, _) = self.conv_mid.forward(g, u, h, w);
        let m = g.gelu(m);
        let (out, _, _) = self.conv_out.forward(g, m, h, w);
        out
    }
}

/// Tape form of the noise-prediction objective: sum of squared errors.
pub fn squared_error_sum(g: &mut Graph, epsilon_hat: Var, epsilon: &Matrix) -> Var {
    let target = g.constant(epsilon.clone());
    let diff = g.sub(epsilon_hat, target);
    let sq = g.mul(diff, diff);
    g.sum(sq)
}

/// Mean over elements of the squared difference.
pub fn loss_mse(epsilon: &Latent, epsilon_hat: &Latent) -> Result<f64> {
    if epsilon.values.shape() != epsilon_hat.values.shape() || (epsilon.h, epsilon.w) != (epsilon_hat.h, epsilon_hat.w) {
        return Err(Error::Shape("noise and prediction shapes differ".into()));
    }
    let n = epsilon.values.len() as f64;
    Ok(epsilon
        .values
        .data()
        .iter()
        .zip(epsilon_hat.values.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

impl Model {
    pub fn vae_encode(&self, image: &Image) -> Result<Latent> {
        self.vae.encode(&self.params, image)
    }

    pub fn vae_decode(&self, latent: &Latent) -> Image {
        self.vae.decode(&self.params, latent)
    }

    pub fn denoise_predict(&self, cond: &DiffusionConditioning) -> Result<Latent> {
        if cond.psi.cols() != self.dims.n || cond.psi.rows() < 1 {
            return Err(Error::Shape(format!(
                "conditioning width {} does not match text width {}",
                cond.psi.cols(),
                self.dims.n
            )));
        }
        if cond.gamma.values.cols() != LATENT_CHANNELS || cond.gamma.values.rows() != cond.gamma.h * cond.gamma.w {
            return Err(Error::Shape("malformed latent".into()));
        }
        let mut g = Graph::inference(&self.params);
        let z = g.constant(cond.gamma.values.clone());
        let psi = g.constant(cond.psi.clone());
        let out = self.denoiser.forward(&mut g, z, psi, cond.gamma.h, cond.gamma.w);
        Ok(Latent {
            h: cond.gamma.h,
            w: cond.gamma.w,
            values: g.value(out).clone(),
        })
    }

    /// Ancestral reverse process from pure noise, conditioned on
    /// `text_features` at every step.
    pub fn sample_latent(&self, text_features: &Matrix, seed: u64) -> Result<Latent> {
        let side = self.dims.latent_side();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Latent::gaussian(side, side, &mut rng);
        for tau in (1..=self.schedule.steps()).rev() {
            let cond = DiffusionConditioning::new(x.clone(), tau, text_features);
            let eps = self.denoise_predict(&cond)?;
            let beta = self.schedule.beta(tau);
            let alpha = 1.0 - beta;
            let coef = beta / (1.0 - self.schedule.alpha_bar(tau)).sqrt();
            let mut values = x.values.zip_map(&eps.values, |xv, e| (xv - coef * e) / alpha.sqrt());
            if tau > 1 {
                let noise = Latent::gaussian(side, side, &mut rng);
                values = values.zip_map(&noise.values, |m, z| m + beta.sqrt() * z);
            }
            x = Latent { h: side, w: side, values };
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn model() -> Model {
        Model::new(ModelDims::tiny(), 10, 1).unwrap()
    }

    #[test]
    fn vae_shapes_and_round_trip() {
        let m = Model::new(ModelDims::desk(), 10, 1).unwrap();
        let img = crate::corpus::render_prompt("a red cat", 1, 32, 32);
        let z = m.vae_encode(&img).unwrap();
        assert_eq!(z.shape(), (4, 4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Latent::gaussian(4, 4, &mut rng);
        let x = m.vae_decode(&z);
        let back = m.vae_encode(&x).unwrap();
        assert!(back.values.max_abs_diff(&z.values) <= 1e-6);
        let x2 = m.vae_decode(&back);
        let diff = x.data().iter().zip(x2.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6);
    }

    #[test]
    fn vae_zero_image_and_bad_size() {
        let m = model();
        let z = m.vae_encode(&Image::new(16, 16)).unwrap();
        assert!(z.values.data().iter().all(|&v| v == 0.0));
        assert!(matches!(m.vae_encode(&Image::new(12, 16)), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
        assert!(NoiseSchedule::linear(0, 1e-4, 2e-2).is_err());
    }

    #[test]
    fn add_noise_rejects_bad_tau() {
        let s = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let z = Latent::zeros(2, 2);
        let sample = NoiseSample { epsilon: Latent::zeros(2, 2), tau: 11 };
        assert!(matches!(add_noise(&z, &sample, &s), Err(Error::TauOutOfRange { tau: 11, steps: 10 })));
        let sample = NoiseSample { epsilon: Latent::zeros(2, 2), tau: 0 };
        assert!(add_noise(&z, &sample, &s).is_err());
    }

    #[test]
    fn predictor_shape_determinism_and_text_sensitivity() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gamma = Latent::gaussian(2, 2, &mut rng);
        let t1 = m.encode_text(&crate::textcore::TokenSequence::new(vec![4, 5])).unwrap();
        let t2 = m.encode_text(&crate::textcore::TokenSequence::new(vec![7, 8, 9])).unwrap();
        let c1 = DiffusionConditioning::new(gamma.clone(), 5, &t1.sequence.features);
        let c2 = DiffusionConditioning::new(gamma.clone(), 5, &t2.sequence.features);
        let a = m.denoise_predict(&c1).unwrap();
        assert_eq!(a.shape(), gamma.shape());
        assert_eq!(a, m.denoise_predict(&c1).unwrap());
        let b = m.denoise_predict(&c2).unwrap();
        assert!(a.values.max_abs_diff(&b.values) > 1e-9);
        let bad = DiffusionConditioning {
            gamma,
            psi: Matrix::zeros(2, 3),
            tau: 1,
        };
        assert!(matches!(m.denoise_predict(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn mse_values() {
        let ones = Latent {
            h: 2,
            w: 2,
            values: Matrix::filled(4, 4, 1.0),
        };
        assert_eq!(loss_mse(&ones, &ones).unwrap(), 0.0);
        assert_eq!(loss_mse(&ones, &Latent::zeros(2, 2)).unwrap(), 1.0);
        assert!(loss_mse(&ones, &Latent::zeros(1, 2)).is_err());
    }

    #[test]
    fn psi_leads_with_time_embedding() {
        let f = Matrix::filled(3, 8, 0.5);
        let c = DiffusionConditioning::new(Latent::zeros(2, 2), 7, &f);
        assert_eq!(c.psi.rows(), 4);
        assert_eq!(c.psi.row(0), time_embedding(7, 8).row(0));
    }
}
