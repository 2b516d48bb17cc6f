//! Image encoder, adaptive feature extraction (softmax patch weighting) and
//! the CLIP-Enhance contrastive loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{ContrastiveForm, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::nn::{Attention, Component, EncoderBlock, FeedForward, Graph, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::raster::Image;
use crate::refiner::PooledFeature;
use crate::tensor::Matrix;

/// `P x n` patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap(pub Matrix);

impl PatchFeatureMap {
    pub fn patches(&self) -> usize {
        self.0.rows()
    }
}

/// Length-`P` probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicWeights(pub Vec<f64>);

/// Which reading of the contrastive objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipReading {
    /// `-(1/B) sum_i log(exp(s_ii) / sum_{j != i} exp(s_ij))`
    #[default]
    PerSample,
    /// `-(1/B) log sum_i (exp(s_ii) / sum_{j != i} exp(s_ij))`
    LogOfSum,
}

impl From<ClipReading> for ContrastiveForm {
    fn from(r: ClipReading) -> Self {
        match r {
            ClipReading::PerSample => ContrastiveForm::PerSample,
            ClipReading::LogOfSum => ContrastiveForm::LogOfSum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub reading: ClipReading,
    pub temperature: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            reading: ClipReading::PerSample,
            temperature: 1.0,
        }
    }
}

/// How patch features become one image vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImagePooling {
    #[default]
    Adaptive,
    /// Plain mean, the module-off ablation.
    Mean,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch_embed: Linear,
    pos_emb: ParamId,
    blocks: Vec<EncoderBlock>,
    ln_f: LayerNorm,
    image_size: usize,
    patch_size: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, dims: &ModelDims) -> Self {
        let comp = Component::ImageEncoder;
        let patch_dim = dims.patch_size * dims.patch_size * Image::CHANNELS;
        Self {
            patch_embed: Linear::new(store, init, "image_encoder.patch", comp, patch_dim, dims.n),
            pos_emb: store.register("image_encoder.pos", comp, init.embedding(dims.patches(), dims.n)),
            blocks: (0..dims.img_layers)
                .map(|i| EncoderBlock::new(store, init, &format!("image_encoder.block{i}"), comp, dims.n, dims.img_heads, dims.img_ff))
                .collect(),
            ln_f: LayerNorm::new(store, "image_encoder.ln_f", comp, dims.n),
            image_size: dims.image_size,
            patch_size: dims.patch_size,
        }
    }

    fn patch_matrix(&self, image: &Image) -> Result<Matrix> {
        if image.height() != self.image_size || image.width() != self.image_size {
            return Err(Error::Shape(format!(
                "image is {}x{}, encoder expects {s}x{s}",
                image.height(),
                image.width(),
                s = self.image_size
            )));
        }
        let side = self.image_size / self.patch_size;
        let p = self.patch_size;
        let mut out = Matrix::zeros(side * side, p * p * Image::CHANNELS);
        for py in 0..side {
            for px in 0..side {
                let row = out.row_mut(py * side + px);
                for y in 0..p {
                    for x in 0..p {
                        let k = (y * p + x) * 3;
                        row[k..k + 3].copy_from_slice(&image.pixel(py * p + y, px * p + x));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, image: &Image) -> Result<Var> {
        let patches = g.constant(self.patch_matrix(image)?);
        let x = self.patch_embed.forward(g, patches);
        let pos = g.param(self.pos_emb);
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            x = b.forward(g, x, None);
        }
        Ok(self.ln_f.forward(g, x))
    }
}

/// Self-attention with residual, feed-forward, ReLU, width-1 score head,
/// softmax over patches. No positional input, so weights follow patch order.
#[derive(Debug, Clone)]
pub struct Afem {
    attn: Attention,
    ff: FeedForward,
    head: Linear,
}

impl Afem {
    pub fn new(store: &mut ParamStore, init: &mut Init, n: usize, hidden: usize) -> Self {
        let comp = Component::Afem;
        Self {
            attn: Attention::new(store, init, "afem.attn", comp, n, n, n, 1),
            ff: FeedForward::new(store, init, "afem.ff", comp, n, hidden),
            head: Linear::new(store, init, "afem.head", comp, n, 1),
        }
    }

    /// `P x 1` column of softmax weights.
    pub fn weights(&self, g: &mut Graph, patches: Var) -> Var {
        let a = self.attn.forward(g, patches, patches, None);
        let x = g.add(patches, a);
        let x = self.ff.forward(g, x);
        let x = g.relu(x);
        let scores = self.head.forward(g, x);
        let row = g.transpose(scores);
        let w = g.softmax_rows(row);
        g.transpose(w)
    }

    /// `1 x n` pooled feature `w^T patches`.
    pub fn pool(&self, g: &mut Graph, patches: Var, mode: ImagePooling) -> Var {
        match mode {
            ImagePooling::Adaptive => {
                let w = self.weights(g, patches);
                let wt = g.transpose(w);
                g.matmul(wt, patches)
            }
            ImagePooling::Mean => {
                let p = g.value(patches).rows();
                let w = g.constant(Matrix::filled(1, p, 1.0 / p as f64));
                g.matmul(w, patches)
            }
        }
    }
}

/// `w^T patches`, checked.
pub fn adaptive_pool(patches: &PatchFeatureMap, w: &DynamicWeights) -> Result<PooledFeature> {
    if w.0.len() != patches.patches() {
        return Err(Error::Shape(format!(
            "{} weights for {} patches",
            w.0.len(),
            patches.patches()
        )));
    }
    let wm = Matrix::from_vec(1, w.0.len(), w.0.clone());
    Ok(PooledFeature(wm.matmul(&patches.0).into_vec()))
}

fn check_batch(rows: usize, other: usize, what: &str) -> Result<()> {
    if rows != other {
        return Err(Error::Shape(format!("{rows} text features vs {other} image features")));
    }
    if rows < 2 {
        return Err(Error::Loss(format!("{what} needs a batch of at least 2, got {rows}")));
    }
    Ok(())
}

fn check_norms(m: &Matrix, side: &str) -> Result<()> {
    for r in 0..m.rows() {
        if crate::tensor::norm(m.row(r)) == 0.0 {
            return Err(Error::ZeroNorm(format!("{side} feature {r}")));
        }
    }
    Ok(())
}

/// Tape form over `B x n` text and image batches.
pub fn clip_loss_var(g: &mut Graph, text: Var, image: Var, cfg: ClipConfig) -> Result<Var> {
    let (t, v) = (g.value(text), g.value(image));
    check_batch(t.rows(), v.rows(), "contrastive loss")?;
    if t.cols() != v.cols() {
        return Err(Error::Shape(format!("feature widths {} and {} differ", t.cols(), v.cols())));
    }
    check_norms(t, "text")?;
    check_norms(v, "image")?;
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!("temperature {} must be positive", cfg.temperature)));
    }
    let tn = g.normalize_rows(text);
    let vn = g.normalize_rows(image);
    let mut sim = g.matmul_t(tn, vn);
    if cfg.temperature != 1.0 {
        sim = g.scale(sim, 1.0 / cfg.temperature);
    }
    Ok(g.contrastive(sim, cfg.reading.into()))
}

/// Contrastive loss between pooled coarse-prompt text features and
/// adaptively pooled image features.
pub fn loss_clip(text_pooled: &[PooledFeature], image_adapted: &[PooledFeature]) -> Result<f64> {
    loss_clip_with(text_pooled, image_adapted, ClipConfig::default())
}

pub fn loss_clip_with(text_pooled: &[PooledFeature], image_adapted: &[PooledFeature], cfg: ClipConfig) -> Result<f64> {
    check_batch(text_pooled.len(), image_adapted.len(), "contrastive loss")?;
    let to_matrix = |fs: &[PooledFeature]| -> Result<Matrix> {
        let width = fs[0].0.len();
        if fs.iter().any(|f| f.0.len() != width) {
            return Err(Error::Shape("ragged feature batch".into()));
        }
        Ok(Matrix::from_vec(fs.len(), width, fs.iter().flat_map(|f| f.0.iter().copied()).collect()))
    };
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let t = g.constant(to_matrix(text_pooled)?);
    let v = g.constant(to_matrix(image_adapted)?);
    let loss = clip_loss_var(&mut g, t, v, cfg)?;
    Ok(g.value(loss).item())
}

impl Model {
    pub fn encode_image(&self, image: &Image) -> Result<PatchFeatureMap> {
        let mut g = Graph::inference(&self.params);
        let out = self.image_encoder.forward(&mut g, image)?;
        Ok(PatchFeatureMap(g.value(out).clone()))
    }

    pub fn dynamic_weights(&self, patches: &PatchFeatureMap) -> Result<DynamicWeights> {
        if patches.patches() == 0 || patches.0.cols() != self.dims.n {
            return Err(Error::Shape(format!(
                "patch map {:?} does not match width {}",
                patches.0.shape(),
                self.dims.n
            )));
        }
        let mut g = Graph::inference(&self.params);
        let p = g.constant(patches.0.clone());
        let w = self.afem.weights(&mut g, p);
        Ok(DynamicWeights(g.value(w).clone().into_vec()))
    }

    /// Encodes the image and pools it into one `n`-vector.
    pub fn image_feature(&self, image: &Image, mode: ImagePooling) -> Result<PooledFeature> {
        let mut g = Graph::inference(&self.params);
        let patches = self.image_encoder.forward(&mut g, image)?;
        let pooled = self.afem.pool(&mut g, patches, mode);
        Ok(PooledFeature(g.value(pooled).clone().into_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::render_prompt;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        Model::new(ModelDims::tiny(), 10, 2).unwrap()
    }

    fn pf(v: &[f64]) -> PooledFeature {
        PooledFeature(v.to_vec())
    }

    #[test]
    fn encode_image_patch_count() {
        let m = Model::new(ModelDims::desk(), 10, 2).unwrap();
        let img = render_prompt("a red cat", 1, 32, 32);
        let f = m.encode_image(&img).unwrap();
        assert_eq!(f.0.shape(), (16, 64));
        assert_eq!(f, m.encode_image(&img).unwrap());
        let other = render_prompt("a red house", 1, 32, 32);
        assert_ne!(f, m.encode_image(&other).unwrap());
        assert!(matches!(m.encode_image(&Image::new(16, 16)), Err(Error::Shape(_))));
    }

    #[test]
    fn weights_on_simplex_and_uniform_for_identical_rows() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = Matrix::from_vec(5, 8, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w = m.dynamic_weights(&PatchFeatureMap(feats)).unwrap();
        assert!((w.0.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert!(w.0.iter().all(|&x| x >= 0.0));
        let same = Matrix::from_vec(4, 8, [0.3, -0.2, 0.1, 0.9, 0.0, 0.5, -0.7, 0.2].repeat(4));
        let w = m.dynamic_weights(&PatchFeatureMap(same)).unwrap();
        for x in w.0 {
            assert!((x - 0.25).abs() <= 1e-12);
        }
    }

    #[test]
    fn weights_follow_patch_permutation() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = Matrix::from_vec(4, 8, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect());
        let perm = [2, 0, 3, 1];
        let permuted = Matrix::from_rows(&perm.iter().map(|&i| feats.row(i).to_vec()).collect::<Vec<_>>());
        let w = m.dynamic_weights(&PatchFeatureMap(feats)).unwrap();
        let wp = m.dynamic_weights(&PatchFeatureMap(permuted)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((wp.0[k] - w.0[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn pool_one_hot_uniform_and_mismatch() {
        let patches = PatchFeatureMap(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]));
        assert_eq!(adaptive_pool(&patches, &DynamicWeights(vec![0.0, 1.0])).unwrap(), pf(&[3.0, 6.0]));
        assert_eq!(adaptive_pool(&patches, &DynamicWeights(vec![0.5, 0.5])).unwrap(), pf(&[2.0, 4.0]));
        assert!(adaptive_pool(&patches, &DynamicWeights(vec![1.0])).is_err());
    }

    #[test]
    fn hand_values() {
        let l = loss_clip(&[pf(&[1.0, 0.0]), pf(&[0.0, 1.0])], &[pf(&[1.0, 0.0]), pf(&[0.0, 1.0])]).unwrap();
        assert!((l + 1.0).abs() <= 1e-9);
        let u = pf(&[0.6, 0.8]);
        let l = loss_clip(&[u.clone(), u.clone()], &[u.clone(), u]).unwrap();
        assert!(l.abs() <= 1e-9);
    }

    #[test]
    fn errors() {
        assert!(matches!(loss_clip(&[pf(&[1.0])], &[pf(&[1.0])]), Err(Error::Loss(_))));
        assert!(matches!(
            loss_clip(&[pf(&[1.0, 0.0]), pf(&[0.0, 0.0])], &[pf(&[1.0, 0.0]), pf(&[0.0, 1.0])]),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn scale_invariance_and_temperature() {
        let t = vec![pf(&[1.0, 2.0]), pf(&[-1.0, 0.5]), pf(&[0.3, 0.3])];
        let v = vec![pf(&[0.5, 1.0]), pf(&[2.0, -1.0]), pf(&[1.0, 0.1])];
        let base = loss_clip(&t, &v).unwrap();
        let ts: Vec<_> = t.iter().zip([2.0, 0.1, 7.0]).map(|(f, k)| pf(&f.0.iter().map(|x| x * k).collect::<Vec<_>>())).collect();
        assert!((loss_clip(&ts, &v).unwrap() - base).abs() <= 1e-12);
        let warm = loss_clip_with(&t, &v, ClipConfig { temperature: 0.5, ..Default::default() }).unwrap();
        assert!((warm - base).abs() > 1e-6);
        let alt = loss_clip_with(&t, &v, ClipConfig { reading: ClipReading::LogOfSum, temperature: 1.0 }).unwrap();
        assert!(alt.is_finite());
    }
}
