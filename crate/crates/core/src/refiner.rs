//! The prompt refiner: text encoder, domain adapter and teacher-forced
//! text decoder.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims, Pooling};
use crate::nn::{causal_mask, key_padding_mask, Attention, Component, EncoderBlock, FeedForward, Graph, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::textcore::{TokenSequence, Vocabulary};

/// Per-token features with their padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub features: Matrix,
    pub mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText {
    pub sequence: FeatureSequence,
    pub pooled: PooledFeature,
    /// Set when the input was longer than `max_len` and got cut.
    pub truncated: bool,
}

/// Tape handles produced by [`TextEncoder::forward`].
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub features: Var,
    pub pooled: Var,
    pub mask: Vec<bool>,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    pub max_len: usize,
    pub pooling: Pooling,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, dims: &ModelDims, vocab_size: usize) -> Self {
        let c = Component::TextEncoder;
        let tok_emb = store.register("text_encoder.tok_emb", c, init.embedding(vocab_size, dims.n));
        let pos_emb = store.register("text_encoder.pos_emb", c, init.embedding(dims.max_len, dims.n));
        let blocks = (0..dims.enc_layers)
            .map(|i| EncoderBlock::new(store, init, &format!("text_encoder.block{i}"), c, dims.n, dims.enc_heads, dims.enc_ff))
            .collect();
        let ln_f = LayerNorm::new(store, "text_encoder.ln_f", c, dims.n);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            max_len: dims.max_len,
            pooling: dims.pooling,
        }
    }

    pub fn forward(&self, g: &mut Graph, seq: &TokenSequence) -> Result<EncodedVars> {
        let truncated = seq.len() > self.max_len;
        let len = seq.len().min(self.max_len);
        let ids = &seq.ids[..len];
        let mask = seq.mask[..len].to_vec();
        let real = mask.iter().filter(|&&m| m).count();
        if real == 0 {
            return Err(Error::Shape("cannot encode a sequence without real tokens".into()));
        }
        let vocab = g.params().value(self.tok_emb).rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index { index: bad, size: vocab });
        }
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let x = g.gather_rows(tok, ids);
        let positions: Vec<usize> = (0..len).collect();
        let p = g.gather_rows(pos, &positions);
        let mut x = g.add(x, p);
        let attn_mask = key_padding_mask(len, &mask);
        for block in &self.blocks {
            x = block.forward(g, x, attn_mask.as_ref());
        }
        let features = self.ln_f.forward(g, x);
        let mut weights = Matrix::zeros(1, len);
        match self.pooling {
            Pooling::MaskedMean => {
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        weights.set(0, i, 1.0 / real as f64);
                    }
                }
            }
            Pooling::LastToken => {
                let last = mask.iter().rposition(|&m| m).expect("at least one real token");
                weights.set(0, last, 1.0);
            }
        }
        let w = g.constant(weights);
        let pooled = g.matmul(w, features);
        Ok(EncodedVars {
            features,
            pooled,
            mask,
            truncated,
        })
    }
}

/// Two affine maps with a GELU between, applied to each token independently.
#[derive(Debug, Clone)]
pub struct DomainAdapter {
    pub hidden: Linear,
    pub out: Linear,
    pub input_width: usize,
}

impl DomainAdapter {
    pub fn new(store: &mut ParamStore, init: &mut Init, n: usize, hidden: usize, m: usize) -> Self {
        let c = Component::Adapter;
        Self {
            hidden: Linear::new(store, init, "adapter.hidden", c, n, hidden),
            out: Linear::new(store, init, "adapter.out", c, hidden, m),
            input_width: n,
        }
    }

    pub fn forward(&self, g: &mut Graph, features: Var) -> Var {
        let h = self.hidden.forward(g, features);
        let h = g.gelu(h);
        self.out.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, dims: &ModelDims) -> Self {
        let c = Component::Decoder;
        let m = dims.m;
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), c, m),
            self_attn: Attention::new(store, init, &format!("{name}.self_attn"), c, m, m, m, dims.dec_heads),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), c, m),
            cross_attn: Attention::new(store, init, &format!("{name}.cross_attn"), c, m, m, m, dims.dec_heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), c, m),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), c, m, dims.dec_ff),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, memory: Var, self_mask: &Matrix, cross_mask: Option<&Matrix>) -> Var {
        let h = self.ln_self.forward(g, x);
        let a = self.self_attn.forward(g, h, h, Some(self_mask));
        let x = g.add(x, a);
        let h = self.ln_cross.forward(g, x);
        let a = self.cross_attn.forward(g, h, memory, cross_mask);
        let x = g.add(x, a);
        let h = self.ln_ff.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct TextDecoder {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
    pub out: Linear,
    pub max_len: usize,
}

impl TextDecoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, dims: &ModelDims, vocab_size: usize) -> Self {
        let c = Component::Decoder;
        let tok_emb = store.register("decoder.tok_emb", c, init.embedding(vocab_size, dims.m));
        let pos_emb = store.register("decoder.pos_emb", c, init.embedding(dims.max_len, dims.m));
        let blocks = (0..dims.dec_layers)
            .map(|i| DecoderBlock::new(store, init, &format!("decoder.block{i}"), dims))
            .collect();
        let ln_f = LayerNorm::new(store, "decoder.ln_f", c, dims.m);
        let out = Linear::new(store, init, "decoder.out", c, dims.m, vocab_size);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            out,
            max_len: dims.max_len,
        }
    }

    /// Logits (`inputs.len() x |V|`) for every position of a causal pass.
    pub fn forward(&self, g: &mut Graph, memory: Var, memory_mask: &[bool], inputs: &[usize]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Loss("decoder input is empty".into()));
        }
        if inputs.len() > self.max_len {
            return Err(Error::GenerationLength {
                len: inputs.len(),
                max_len: self.max_len,
            });
        }
        let vocab = g.params().value(self.tok_emb).rows();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index { index: bad, size: vocab });
        }
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let x = g.gather_rows(tok, inputs);
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let p = g.gather_rows(pos, &positions);
        let mut x = g.add(x, p);
        let self_mask = causal_mask(inputs.len());
        let cross_mask = key_padding_mask(inputs.len(), memory_mask);
        for block in &self.blocks {
            x = block.forward(g, x, memory, &self_mask, cross_mask.as_ref());
        }
        let h = self.ln_f.forward(g, x);
        Ok(self.out.forward(g, h))
    }
}

/// Tape handles of a teacher-forced pass.
pub struct TeacherForcedVars {
    pub logits: Var,
    /// Sum of token negative log-likelihoods.
    pub nll_sum: Var,
    /// Number of predicted (real) target positions.
    pub count: usize,
}

/// Splits `<bos> t1 .. tk <eos>` into decoder inputs and gold next tokens.
pub fn teacher_forcing_pairs(target: &TokenSequence) -> Result<(Vec<usize>, Vec<usize>)> {
    let ids = target.real_ids();
    if ids.len() < 2 {
        return Err(Error::Loss("target needs at least <bos> and <eos>".into()));
    }
    if ids[0] != Vocabulary::BOS_ID || ids[ids.len() - 1] != Vocabulary::EOS_ID {
        return Err(Error::Loss("target must start with <bos> and end with <eos>".into()));
    }
    Ok((ids[..ids.len() - 1].to_vec(), ids[1..].to_vec()))
}

pub fn decode_teacher_forced_vars(
    g: &mut Graph,
    decoder: &TextDecoder,
    memory: Var,
    memory_mask: &[bool],
    target: &TokenSequence,
) -> Result<TeacherForcedVars> {
    let (inputs, gold) = teacher_forcing_pairs(target)?;
    let logits = decoder.forward(g, memory, memory_mask, &inputs)?;
    let count = gold.len();
    let nll_sum = g.cross_entropy_sum(logits, Rc::new(gold));
    Ok(TeacherForcedVars { logits, nll_sum, count })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    pub logits: Matrix,
    /// Mean negative log-likelihood over predicted positions.
    pub loss: f64,
}

/// Mean over rows of `-log softmax(logits[r])[gold[r]]`.
pub fn mean_nll(logits: &Matrix, gold: &[usize]) -> Result<f64> {
    if gold.is_empty() || logits.rows() != gold.len() {
        return Err(Error::Loss(format!(
            "{} logit rows for {} gold tokens",
            logits.rows(),
            gold.len()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let l = g.constant(logits.clone());
    let s = g.cross_entropy_sum(l, Rc::new(gold.to_vec()));
    Ok(g.value(s).item() / gold.len() as f64)
}

impl Model {
    pub fn encode_text(&self, seq: &TokenSequence) -> Result<EncodedText> {
        let mut g = Graph::inference(&self.params);
        let enc = self.text_encoder.forward(&mut g, seq)?;
        Ok(EncodedText {
            sequence: FeatureSequence {
                features: g.value(enc.features).clone(),
                mask: enc.mask,
            },
            pooled: PooledFeature(g.value(enc.pooled).data().to_vec()),
            truncated: enc.truncated,
        })
    }

    pub fn adapt(&self, features: &FeatureSequence) -> Result<FeatureSequence> {
        adapt_with(&self.params, &self.adapter, features)
    }

    pub fn decode_teacher_forced(&self, memory: &FeatureSequence, target: &TokenSequence) -> Result<TeacherForced> {
        self.check_memory(memory)?;
        let mut g = Graph::inference(&self.params);
        let mem = g.constant(memory.features.clone());
        let tf = decode_teacher_forced_vars(&mut g, &self.decoder, mem, &memory.mask, target)?;
        Ok(TeacherForced {
            logits: g.value(tf.logits).clone(),
            loss: g.value(tf.nll_sum).item() / tf.count as f64,
        })
    }

    /// Next-token logits after `prefix` (which must start with `<bos>`).
    pub fn decoder_step(&self, memory: &FeatureSequence, prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_memory(memory)?;
        if prefix.first() != Some(&Vocabulary::BOS_ID) {
            return Err(Error::Loss("decoder prefix must start with <bos>".into()));
        }
        let mut g = Graph::inference(&self.params);
        let mem = g.constant(memory.features.clone());
        let logits = self.decoder.forward(&mut g, mem, &memory.mask, prefix)?;
        let lv = g.value(logits);
        Ok(lv.row(lv.rows() - 1).to_vec())
    }

    /// Encoder then adapter: the decoder's cross-attention memory.
    pub fn memory_for(&self, seq: &TokenSequence) -> Result<FeatureSequence> {
        let enc = self.encode_text(seq)?;
        self.adapt(&enc.sequence)
    }

    fn check_memory(&self, memory: &FeatureSequence) -> Result<()> {
        if memory.width() != self.dims.m || memory.mask.len() != memory.features.rows() {
            return Err(Error::Shape(format!(
                "decoder memory is {:?} with {} mask entries, expected width {}",
                memory.features.shape(),
                memory.mask.len(),
                self.dims.m
            )));
        }
        Ok(())
    }
}

/// Applies `adapter` (whose weights live in `params`) token by token.
pub fn adapt_with(params: &ParamStore, adapter: &DomainAdapter, features: &FeatureSequence) -> Result<FeatureSequence> {
    if features.width() != adapter.input_width {
        return Err(Error::Shape(format!(
            "adapter expects width {}, got {}",
            adapter.input_width,
            features.width()
        )));
    }
    let mut g = Graph::inference(params);
    let x = g.constant(features.features.clone());
    let y = adapter.forward(&mut g, x);
    Ok(FeatureSequence {
        features: g.value(y).clone(),
        mask: features.mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gelu;
    use crate::model::ModelDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(vocab: usize) -> Model {
        Model::new(ModelDims::tiny(), vocab, 7).unwrap()
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let m = tiny_model(10);
        let seq = TokenSequence::new(vec![4, 5, 6]);
        let a = m.encode_text(&seq).unwrap();
        assert_eq!(a.sequence.features.shape(), (3, 8));
        assert_eq!(a.pooled.0.len(), 8);
        let b = m.encode_text(&seq).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn padding_does_not_leak() {
        let m = tiny_model(10);
        let seq = TokenSequence::new(vec![4, 5, 6]);
        let plain = m.encode_text(&seq).unwrap();
        let padded = m.encode_text(&seq.padded(8)).unwrap();
        for (a, b) in plain.pooled.0.iter().zip(&padded.pooled.0) {
            assert!((a - b).abs() < 1e-6);
        }
        for r in 0..3 {
            for c in 0..8 {
                assert!((plain.sequence.features.get(r, c) - padded.sequence.features.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlong_input_is_truncated_with_flag() {
        let m = tiny_model(10);
        let seq = TokenSequence::new(vec![4; 20]);
        let enc = m.encode_text(&seq).unwrap();
        assert!(enc.truncated);
        assert_eq!(enc.sequence.features.rows(), ModelDims::tiny().max_len);
    }

    fn hand_adapter(w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> (ParamStore, DomainAdapter) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { rng: &mut rng };
        let adapter = DomainAdapter::new(&mut store, &mut init, 3, 3, 2);
        *store.value_mut(adapter.hidden.w) = Matrix::from_vec(3, 3, w1.to_vec());
        *store.value_mut(adapter.hidden.b.unwrap()) = Matrix::from_vec(1, 3, b1.to_vec());
        *store.value_mut(adapter.out.w) = Matrix::from_vec(3, 2, w2.to_vec());
        *store.value_mut(adapter.out.b.unwrap()) = Matrix::from_vec(1, 2, b2.to_vec());
        (store, adapter)
    }

    #[test]
    fn adapter_zero_in_zero_out() {
        let (store, adapter) = hand_adapter(&[0.3; 9], &[0.0; 3], &[-0.2; 6], &[0.0; 2]);
        let f = FeatureSequence {
            features: Matrix::zeros(2, 3),
            mask: vec![true, true],
        };
        let out = adapt_with(&store, &adapter, &f).unwrap();
        assert!(out.features.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adapter_matches_hand_matrix_product() {
        let w1 = [0.5, -1.0, 0.25, 0.0, 2.0, -0.5, 1.5, 0.1, 0.3];
        let b1 = [0.1, -0.2, 0.05];
        let w2 = [1.0, -0.5, 0.2, 0.7, -1.2, 0.4];
        let b2 = [0.01, -0.03];
        let (store, adapter) = hand_adapter(&w1, &b1, &w2, &b2);
        let x = [0.7, -0.4, 1.1];
        let mut hidden = [0.0; 3];
        for j in 0..3 {
            let mut s = b1[j];
            for i in 0..3 {
                s += x[i] * w1[i * 3 + j];
            }
            hidden[j] = gelu(s);
        }
        let mut expected = [0.0; 2];
        for j in 0..2 {
            let mut s = b2[j];
            for i in 0..3 {
                s += hidden[i] * w2[i * 2 + j];
            }
            expected[j] = s;
        }
        let f = FeatureSequence {
            features: Matrix::from_vec(1, 3, x.to_vec()),
            mask: vec![true],
        };
        let out = adapt_with(&store, &adapter, &f).unwrap();
        for j in 0..2 {
            assert!((out.features.get(0, j) - expected[j]).abs() < 1e-9);
        }
        let bad = FeatureSequence {
            features: Matrix::zeros(1, 4),
            mask: vec![true],
        };
        assert!(matches!(adapt_with(&store, &adapter, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn adapter_is_per_token() {
        let m = tiny_model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let f = FeatureSequence {
            features: Matrix::from_rows(&rows),
            mask: vec![true; 4],
        };
        let perm = [2, 0, 3, 1];
        let permuted = FeatureSequence {
            features: Matrix::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()),
            mask: vec![true; 4],
        };
        let a = m.adapt(&f).unwrap();
        let b = m.adapt(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(a.features.row(i), b.features.row(k));
        }
    }

    #[test]
    fn forced_gold_logits_give_zero_loss() {
        let gold = [1usize, 3, 0, 2];
        let mut logits = Matrix::filled(4, 5, -1e4);
        for (r, &t) in gold.iter().enumerate() {
            logits.set(r, t, 1e4);
        }
        assert_eq!(mean_nll(&logits, &gold).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Matrix::filled(5, 8, 0.37);
        let loss = mean_nll(&logits, &[0, 1, 2, 7, 4]).unwrap();
        let enumerated = -(1.0f64 / (0..8).map(|_| 1.0).sum::<f64>()).ln();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        assert!((loss - enumerated).abs() < 1e-12);
        assert!((loss - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn bad_targets_rejected() {
        let m = tiny_model(10);
        let mem = m.memory_for(&TokenSequence::new(vec![4, 5])).unwrap();
        assert!(m.decode_teacher_forced(&mem, &TokenSequence::new(vec![])).is_err());
        assert!(m.decode_teacher_forced(&mem, &TokenSequence::new(vec![4, 2])).is_err());
        assert!(m.decoder_step(&mem, &[4]).is_err());
        assert!(matches!(
            m.decoder_step(&mem, &[1; 13]),
            Err(Error::GenerationLength { len: 13, max_len: 12 })
        ));
    }

    #[test]
    fn causality_of_teacher_forced_logits() {
        let m = tiny_model(10);
        let mem = m.memory_for(&TokenSequence::new(vec![4, 5, 6])).unwrap();
        let a = m.decode_teacher_forced(&mem, &TokenSequence::framed(&[4, 5, 6, 7])).unwrap();
        let b = m.decode_teacher_forced(&mem, &TokenSequence::framed(&[4, 5, 9, 7])).unwrap();
        // input position 3 holds the changed token; rows 0..3 must not move.
        for r in 0..3 {
            assert_eq!(a.logits.row(r), b.logits.row(r));
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
    }
}
