use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::nn::Component;
use crate::tensor::Matrix;
use crate::textcore::Vocabulary;

use super::config::TrainConfig;
use super::optim::AdamW;

const MAGIC: &[u8; 8] = b"FGCKPT\0\x01";

/// Model weights, vocabulary, training configuration and optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub epoch: usize,
    pub optimizer: Option<AdamW>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    component: Component,
    rows: usize,
    cols: usize,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    /// Blocks with moment tensors; each contributes `m` then `v` after the weights.
    moment_blocks: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    dims: ModelDims,
    config: TrainConfig,
    model_seed: u64,
    vocab_size: usize,
    vocab_hash: String,
    vocab: Vec<String>,
    step: u64,
    epoch: usize,
    blocks: Vec<BlockEntry>,
    optimizer: Option<OptimizerEntry>,
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optimizer.as_ref().map(|o| o.step).unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let blocks = params
            .blocks()
            .iter()
            .map(|b| BlockEntry {
                name: b.name.clone(),
                component: b.component,
                rows: b.value.rows(),
                cols: b.value.cols(),
                dtype: "f64le".into(),
            })
            .collect();
        let optimizer = self.optimizer.as_ref().map(|o| OptimizerEntry {
            step: o.step,
            beta1: o.cfg.beta1,
            beta2: o.cfg.beta2,
            eps: o.cfg.eps,
            weight_decay: o.cfg.weight_decay,
            moment_blocks: params
                .blocks()
                .iter()
                .enumerate()
                .filter(|(i, _)| o.m[*i].is_some())
                .map(|(_, b)| b.name.clone())
                .collect(),
        });
        let header = Header {
            format: "finegrain-checkpoint/1".into(),
            dims: self.model.dims.clone(),
            config: self.config.clone(),
            model_seed: self.model.seed,
            vocab_size: self.model.vocab_size,
            vocab_hash: self.vocab.hash(),
            vocab: self.vocab.tokens().to_vec(),
            step: self.step(),
            epoch: self.epoch,
            blocks,
            optimizer,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in params.blocks() {
            push_matrix(&mut out, &b.value);
        }
        if let Some(o) = &self.optimizer {
            for (m, v) in o.m.iter().zip(&o.v) {
                if let (Some(m), Some(v)) = (m, v) {
                    push_matrix(&mut out, m);
                    push_matrix(&mut out, v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let vocab = Vocabulary::parse(&header.vocab.join("\n"))?;
        if vocab.hash() != header.vocab_hash || vocab.len() != header.vocab_size {
            return Err(Error::Checkpoint("vocabulary does not match its recorded hash".into()));
        }
        let mut model = Model::new(header.dims.clone(), header.vocab_size, header.model_seed)?;
        if header.blocks.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} blocks stored, architecture has {}",
                header.blocks.len(),
                model.params.len()
            )));
        }
        for entry in &header.blocks {
            let id = model
                .params
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown block {}", entry.name)))?;
            let current = model.params.value(id);
            if current.shape() != (entry.rows, entry.cols) || entry.dtype != "f64le" {
                return Err(Error::Checkpoint(format!("block {} has an unexpected shape or dtype", entry.name)));
            }
            *model.params.value_mut(id) = r.matrix(entry.rows, entry.cols)?;
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let cfg = super::config::AdamWConfig {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                };
                let mut opt = AdamW::new(cfg, model.params.len());
                opt.step = o.step;
                // Moments are stored in block order.
                let mut names = o.moment_blocks.iter().peekable();
                for (i, b) in model.params.blocks().iter().enumerate() {
                    if names.peek() == Some(&&b.name) {
                        names.next();
                        opt.m[i] = Some(r.matrix(b.value.rows(), b.value.cols())?);
                        opt.v[i] = Some(r.matrix(b.value.rows(), b.value.cols())?);
                    }
                }
                if names.next().is_some() {
                    return Err(Error::Checkpoint("optimizer moments out of order".into()));
                }
                Some(opt)
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            model,
            vocab,
            config: header.config,
            epoch: header.epoch,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }

    /// Fails unless `vocab` is the vocabulary the model was trained with.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.hash() != self.vocab.hash() {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcore::TokenSequence;

    fn ckpt() -> Checkpoint {
        let vocab = Vocabulary::from_texts(["a red cat on a hill"]);
        let model = Model::new(ModelDims::tiny(), vocab.len(), 5).unwrap();
        Checkpoint {
            model,
            vocab,
            config: TrainConfig::default(),
            epoch: 2,
            optimizer: None,
        }
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let mut c = ckpt();
        let id = c.model.params.id("adapter.out.weight").unwrap();
        c.model.params.value_mut(id).data_mut()[0] = 0.123456789;
        let mut opt = AdamW::new(Default::default(), c.model.params.len());
        opt.step = 7;
        opt.m[id.0] = Some(Matrix::filled(c.model.params.value(id).rows(), c.model.params.value(id).cols(), 0.5));
        opt.v[id.0] = opt.m[id.0].clone();
        c.optimizer = Some(opt);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.params, c.model.params);
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.epoch, 2);
        let seq = TokenSequence::new(vec![4, 5, 6]);
        assert_eq!(back.model.encode_text(&seq).unwrap(), c.model.encode_text(&seq).unwrap());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = ckpt().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense data"), Err(Error::Checkpoint(_))));
        let other = Vocabulary::from_texts(["a blue dog"]);
        assert!(ckpt().check_vocab(&other).is_err());
    }
}
