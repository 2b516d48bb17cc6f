//! Parameter storage and the layers shared by every network in the model.
//!
//! Layers only hold [`ParamId`]s. Values live in a [`ParamStore`] and are bound
//! onto a tape through a [`Graph`], which decides per parameter whether it
//! receives gradients.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::tensor::Matrix;

/// Trainable blocks of the framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Fine-grained text encoder.
    TextEncoder,
    /// Domain adapter between encoder and decoder widths.
    Adapter,
    /// Adaptive feature extraction (dynamic patch weighting).
    Afem,
    /// Text decoder.
    Decoder,
    /// Image encoder.
    ImageEncoder,
    /// Latent noise predictor.
    Denoiser,
    /// Latent autoencoder stub.
    Vae,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::TextEncoder,
        Component::Adapter,
        Component::Afem,
        Component::Decoder,
        Component::ImageEncoder,
        Component::Denoiser,
        Component::Vae,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub component: Component,
    pub value: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, component: Component, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.blocks.len());
        self.blocks.push(ParamBlock {
            name,
            component,
            value,
        });
        ParamId(self.blocks.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.blocks[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.blocks[id.0].value
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn ids_of(&self, component: Component) -> Vec<ParamId> {
        self.ids()
            .filter(|id| self.blocks[id.0].component == component)
            .collect()
    }

    pub fn scalar_count(&self, component: Component) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.component == component)
            .map(|b| b.value.len())
            .sum()
    }

    /// Little-endian bytes of every block of `component`, in registration order.
    pub fn component_bytes(&self, component: Component) -> Vec<u8> {
        self.blocks
            .iter()
            .filter(|b| b.component == component)
            .flat_map(|b| b.value.data().iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }
}

/// Scaled-uniform initializer; all draws come from one seeded stream so the
/// registration order fully determines the initial weights.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Weight of a `fan_in x fan_out` affine map.
    pub fn weight(&mut self, fan_in: usize, fan_out: usize) -> Matrix {
        self.uniform(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn bias(&mut self, fan_in: usize, width: usize) -> Matrix {
        self.uniform(1, width, 0.1 / (fan_in as f64).sqrt())
    }

    pub fn embedding(&mut self, rows: usize, width: usize) -> Matrix {
        self.uniform(rows, width, 0.5)
    }
}

/// Binds a [`ParamStore`] onto a fresh [`Tape`].
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    grad_mask: Vec<bool>,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    /// No parameter receives gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::with_mask(params, vec![false; params.len()])
    }

    pub fn training(params: &'p ParamStore, trainable: &[Component]) -> Self {
        let mask = params
            .blocks()
            .iter()
            .map(|b| trainable.contains(&b.component))
            .collect();
        Self::with_mask(params, mask)
    }

    pub fn with_mask(params: &'p ParamStore, grad_mask: Vec<bool>) -> Self {
        assert_eq!(grad_mask.len(), params.len());
        Self {
            tape: Tape::new(),
            params,
            grad_mask,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = if self.grad_mask[id.0] {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient of `root` for every bound, gradient-requiring parameter.
    pub fn param_grads(&self, root: Var) -> Vec<Option<Matrix>> {
        let grads = self.tape.backward(root);
        self.bound
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(v) if self.grad_mask[i] => grads.get(*v).cloned(),
                _ => None,
            })
            .collect()
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, component: Component, fan_in: usize, fan_out: usize) -> Self {
        let w = store.register(format!("{name}.weight"), component, init.weight(fan_in, fan_out));
        let b = store.register(format!("{name}.bias"), component, init.bias(fan_in, fan_out));
        Self { w, b: Some(b) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, component: Component, width: usize) -> Self {
        let gain = store.register(format!("{name}.gain"), component, Matrix::filled(1, width, 1.0));
        let bias = store.register(format!("{name}.bias"), component, Matrix::zeros(1, width));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }
}

/// Additive attention mask value for blocked positions.
pub const MASKED: f64 = -1e30;

/// Multi-head scaled dot-product attention. Queries and keys may have
/// different input widths (cross-attention).
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        component: Component,
        query_width: usize,
        kv_width: usize,
        width: usize,
        heads: usize,
    ) -> Self {
        assert!(heads >= 1 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), component, query_width, width),
            k: Linear::new(store, init, &format!("{name}.k"), component, kv_width, width),
            v: Linear::new(store, init, &format!("{name}.v"), component, kv_width, width),
            out: Linear::new(store, init, &format!("{name}.out"), component, width, query_width),
            heads,
            width,
        }
    }

    /// `mask` is an additive `queries x keys` matrix (0 or [`MASKED`]).
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, mask: Option<&Matrix>) -> Var {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, keys);
        let v = self.v.forward(g, keys);
        let head_width = self.width / self.heads;
        let scale = 1.0 / (head_width as f64).sqrt();
        let mask = mask.map(|m| g.constant(m.clone()));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_width, head_width),
                    g.slice_cols(k, h * head_width, head_width),
                    g.slice_cols(v, h * head_width, head_width),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let probs = g.softmax_rows(scores);
            outs.push(g.matmul(probs, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, joined)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, component: Component, width: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), component, width, hidden),
            down: Linear::new(store, init, &format!("{name}.down"), component, hidden, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block used by the text and image encoders.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, component: Component, width: usize, heads: usize, d_ff: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), component, width),
            attn: Attention::new(store, init, &format!("{name}.attn"), component, width, width, width, heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), component, width),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), component, width, d_ff),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&Matrix>) -> Var {
        let h = self.ln_attn.forward(g, x);
        let a = self.attn.forward(g, h, h, mask);
        let x = g.add(x, a);
        let h = self.ln_ff.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// `len x len` mask blocking keys whose `mask` entry is false.
pub fn key_padding_mask(queries: usize, key_mask: &[bool]) -> Option<Matrix> {
    if key_mask.iter().all(|&m| m) {
        return None;
    }
    let mut out = Matrix::zeros(queries, key_mask.len());
    for r in 0..queries {
        for (c, &keep) in key_mask.iter().enumerate() {
            if !keep {
                out.set(r, c, MASKED);
            }
        }
    }
    Some(out)
}

/// Lower-triangular causal mask.
pub fn causal_mask(len: usize) -> Matrix {
    let mut out = Matrix::zeros(len, len);
    for r in 0..len {
        for c in r + 1..len {
            out.set(r, c, MASKED);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn graph_binds_each_param_once() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init { rng: &mut rng };
        let lin = Linear::new(&mut store, &mut init, "l", Component::Adapter, 2, 2);
        let mut g = Graph::training(&store, &[Component::Adapter]);
        let x = g.constant(Matrix::from_rows(&[vec![1.0, 2.0]]));
        let y1 = lin.forward(&mut g, x);
        let y2 = lin.forward(&mut g, x);
        let s = g.add(y1, y2);
        let s = g.sum(s);
        let grads = g.param_grads(s);
        // d/dW sum(2 * x W) = 2 x^T 1
        let gw = grads[lin.w.0].as_ref().unwrap();
        assert_eq!(gw.data(), &[2.0, 2.0, 4.0, 4.0]);
    }

    #[test]
    fn frozen_params_have_no_grads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init { rng: &mut rng };
        let lin = Linear::new(&mut store, &mut init, "l", Component::Decoder, 2, 2);
        let mut g = Graph::training(&store, &[Component::Adapter]);
        let x = g.variable(Matrix::from_rows(&[vec![1.0, 2.0]]));
        let y = lin.forward(&mut g, x);
        let s = g.sum(y);
        assert!(g.param_grads(s).iter().all(Option::is_none));
    }
}
