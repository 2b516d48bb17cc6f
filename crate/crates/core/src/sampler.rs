//! Top-k/top-p decoding, one-shot prompt refinement, the iterative
//! candidate-selection protocol and the encoder swap demo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::softmax;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Component;
use crate::raster::Image;
use crate::seeds::seed_of;
use crate::tensor::cosine;
use crate::textcore::{join_words, split_words, TokenSequence, Vocabulary};
use crate::trainer::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub top_k: usize,
    pub max_tokens: usize,
    pub stride: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_p: 0.95,
            top_k: 50,
            max_tokens: 20,
            stride: 6,
            n_candidates: 3,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.top_k == 0 || self.stride == 0 || self.n_candidates == 0 {
            return Err(Error::Config("top_k, stride and n_candidates must be at least 1".into()));
        }
        Ok(())
    }
}

/// Keeps the `k` most probable entries (lower id wins ties), then the
/// shortest prefix of those whose mass reaches `p`, and renormalizes.
pub fn filter_probs(probs: &[f64], k: usize, p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &kept {
        out[i] = probs[i] / mass;
    }
    out
}

pub fn filter_top_k_top_p(logits: &[f64], k: usize, p: f64) -> Vec<f64> {
    filter_probs(&softmax(logits), k, p)
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// One decoding step: the filtered support and the token drawn from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub support: Vec<(usize, f64)>,
    pub token: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub tokens: Vec<usize>,
    /// Set when decoding ended on `<eos>` or at the decoder's length limit.
    pub finished: bool,
    pub trace: Vec<TraceStep>,
}

/// Samples up to `budget` tokens after `<bos> prefix`, conditioned on the
/// refiner memory of `context`.
pub fn continue_tokens(model: &Model, context: &TokenSequence, prefix: &[usize], budget: usize, cfg: &SamplingConfig, seed: u64) -> Result<Continuation> {
    cfg.validate()?;
    let memory = model.memory_for(context)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(prefix.len() + budget + 1);
    ids.push(Vocabulary::BOS_ID);
    ids.extend_from_slice(prefix);
    let mut out = Continuation {
        tokens: Vec::new(),
        finished: false,
        trace: Vec::new(),
    };
    while out.tokens.len() < budget {
        if ids.len() >= model.dims.max_len {
            out.finished = true;
            break;
        }
        let mut logits = model.decoder_step(&memory, &ids)?;
        for banned in [Vocabulary::PAD_ID, Vocabulary::BOS_ID, Vocabulary::UNK_ID] {
            logits[banned] = f64::NEG_INFINITY;
        }
        let probs = filter_top_k_top_p(&logits, cfg.top_k, cfg.top_p);
        let token = sample_index(&probs, &mut rng);
        out.trace.push(TraceStep {
            support: probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, &p)| (i, p)).collect(),
            token,
        });
        if token == Vocabulary::EOS_ID {
            out.finished = true;
            break;
        }
        out.tokens.push(token);
        ids.push(token);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub fine_prompt: String,
    pub tokens: Vec<usize>,
    pub trace: Vec<TraceStep>,
}

fn prompt_tokens(vocab: &Vocabulary, prompt: &str) -> Result<(Vec<String>, TokenSequence)> {
    let words = split_words(prompt);
    if words.is_empty() {
        return Err(Error::Config("empty prompt".into()));
    }
    let seq = vocab.tokenize(prompt);
    Ok((words, seq))
}

/// One-shot refinement: the coarse prompt followed by up to `max_tokens`
/// sampled tokens.
pub fn generate(model: &Model, vocab: &Vocabulary, coarse_prompt: &str, cfg: &SamplingConfig) -> Result<Generation> {
    let (mut words, seq) = prompt_tokens(vocab, coarse_prompt)?;
    let c = continue_tokens(model, &seq, &seq.ids, cfg.max_tokens, cfg, cfg.seed)?;
    words.extend(vocab.words(&c.tokens));
    Ok(Generation {
        fine_prompt: join_words(&words),
        tokens: c.tokens,
        trace: c.trace,
    })
}

/// [`generate`] after checking that `vocab` matches the checkpoint.
pub fn generate_from_checkpoint(ckpt: &Checkpoint, vocab: &Vocabulary, coarse_prompt: &str, cfg: &SamplingConfig) -> Result<Generation> {
    ckpt.check_vocab(vocab)?;
    generate(&ckpt.model, vocab, coarse_prompt, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub words: Vec<String>,
    pub tokens: Vec<usize>,
    pub new_tokens: usize,
    pub finished: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub prefix: String,
    pub candidates: Vec<Candidate>,
    pub selected: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    OpenRound,
    AwaitingSelection,
    Complete,
}

/// Iterative refinement: every round offers `n_candidates` continuations of
/// the previously selected prompt, each `stride` tokens longer unless it
/// finished. The struct doubles as its own replay log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementSession {
    pub id: String,
    pub root_prompt: String,
    pub config: SamplingConfig,
    pub rounds: Vec<Round>,
}

impl RefinementSession {
    pub fn status(&self) -> SessionStatus {
        match self.rounds.last() {
            None => SessionStatus::OpenRound,
            Some(r) => match r.selected {
                None => SessionStatus::AwaitingSelection,
                Some(i) if r.candidates[i].finished => SessionStatus::Complete,
                Some(_) => SessionStatus::OpenRound,
            },
        }
    }

    /// Words and token ids of the prompt the next round extends.
    fn current(&self, vocab: &Vocabulary) -> Result<(Vec<String>, Vec<usize>)> {
        match self.rounds.last() {
            None => {
                let (words, seq) = prompt_tokens(vocab, &self.root_prompt)?;
                Ok((words, seq.ids))
            }
            Some(r) => {
                let c = &r.candidates[r.selected.expect("caller checked status")];
                Ok((c.words.clone(), c.tokens.clone()))
            }
        }
    }

    pub fn selected_text(&self) -> Option<&str> {
        let r = self.rounds.iter().rev().find(|r| r.selected.is_some())?;
        Some(&r.candidates[r.selected?].text)
    }
}

/// Creates a session and runs its first round.
pub fn start_session(model: &Model, vocab: &Vocabulary, id: impl Into<String>, coarse_prompt: &str, cfg: &SamplingConfig) -> Result<RefinementSession> {
    cfg.validate()?;
    prompt_tokens(vocab, coarse_prompt)?;
    let mut s = RefinementSession {
        id: id.into(),
        root_prompt: coarse_prompt.to_string(),
        config: cfg.clone(),
        rounds: Vec::new(),
    };
    continue_round(model, vocab, &mut s)?;
    Ok(s)
}

/// Generates the next round from the selected candidate.
pub fn continue_round(model: &Model, vocab: &Vocabulary, session: &mut RefinementSession) -> Result<()> {
    match session.status() {
        SessionStatus::OpenRound => {}
        SessionStatus::AwaitingSelection => {
            return Err(Error::SessionState("the current round has no selection yet".into()));
        }
        SessionStatus::Complete => return Err(Error::SessionComplete),
    }
    let (words, tokens) = session.current(vocab)?;
    let context = TokenSequence::new(tokens.clone());
    let r = session.rounds.len() as u64;
    let cfg = &session.config;
    let mut candidates = Vec::with_capacity(cfg.n_candidates);
    for c in 0..cfg.n_candidates {
        let seed = seed_of(cfg.seed, r, c as u64);
        let cont = continue_tokens(model, &context, &tokens, cfg.stride, cfg, seed)?;
        let mut cw = words.clone();
        cw.extend(vocab.words(&cont.tokens));
        let mut ct = tokens.clone();
        ct.extend_from_slice(&cont.tokens);
        candidates.push(Candidate {
            text: join_words(&cw),
            words: cw,
            tokens: ct,
            new_tokens: cont.tokens.len(),
            finished: cont.finished,
            seed,
        });
    }
    session.rounds.push(Round {
        prefix: join_words(&words),
        candidates,
        selected: None,
    });
    Ok(())
}

/// Records the user's pick for the open round.
pub fn select(session: &mut RefinementSession, index: usize) -> Result<()> {
    match session.status() {
        SessionStatus::AwaitingSelection => {}
        SessionStatus::Complete => return Err(Error::SessionComplete),
        SessionStatus::OpenRound => return Err(Error::SessionState("no round awaits a selection".into())),
    }
    let round = session.rounds.last_mut().expect("awaiting implies a round");
    if index >= round.candidates.len() {
        return Err(Error::CandidateIndex {
            index,
            count: round.candidates.len(),
        });
    }
    round.selected = Some(index);
    Ok(())
}

/// Selects and, unless the pick finished the prompt, runs the next round.
pub fn select_and_continue(model: &Model, vocab: &Vocabulary, session: &mut RefinementSession, index: usize) -> Result<()> {
    select(session, index)?;
    if session.status() == SessionStatus::OpenRound {
        continue_round(model, vocab, session)?;
    }
    Ok(())
}

/// Re-runs a logged session from its prompt, config and selections.
pub fn replay(model: &Model, vocab: &Vocabulary, log: &RefinementSession) -> Result<RefinementSession> {
    let mut s = start_session(model, vocab, log.id.clone(), &log.root_prompt, &log.config)?;
    for (r, round) in log.rounds.iter().enumerate() {
        let Some(i) = round.selected else { break };
        select(&mut s, i)?;
        if r + 1 < log.rounds.len() {
            continue_round(model, vocab, &mut s)?;
        }
    }
    Ok(s)
}

/// Two reverse-diffusion runs that differ only in the text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapDemo {
    pub initial: Image,
    pub trained: Image,
    /// `1 - cos` between the pooled conditioning features.
    pub feature_distance: f64,
}

/// Conditions the toy reverse process on the initial (untrained) encoder
/// and on the trained encoder, keeping every other block and the noise
/// seed fixed.
pub fn swap_encoder_demo(ckpt: &Checkpoint, prompt: &str, seed: u64) -> Result<SwapDemo> {
    let trained = &ckpt.model;
    let mut initial = trained.clone();
    let init = Model::new(trained.dims.clone(), trained.vocab_size, trained.seed)?;
    initial.copy_component_from(&init, Component::TextEncoder)?;
    let (_, seq) = prompt_tokens(&ckpt.vocab, prompt)?;
    let run = |m: &Model| -> Result<(Image, Vec<f64>)> {
        let enc = m.encode_text(&seq)?;
        let z = m.sample_latent(&enc.sequence.features, seed)?;
        Ok((m.vae_decode(&z).map(|v| v.clamp(0.0, 1.0)), enc.pooled.0))
    };
    let (a, fa) = run(&initial)?;
    let (b, fb) = run(trained)?;
    let cos = cosine(&fa, &fb).ok_or_else(|| Error::ZeroNorm("conditioning".into()))?;
    Ok(SwapDemo {
        initial: a,
        trained: b,
        feature_distance: 1.0 - cos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toyworld::toy_vocabulary_words;
    use crate::model::ModelDims;

    fn setup() -> (Model, Vocabulary) {
        let vocab = Vocabulary::from_words(toy_vocabulary_words());
        (Model::new(ModelDims::tiny(), vocab.len(), 1).unwrap(), vocab)
    }

    #[test]
    fn nucleus_examples() {
        let out = filter_probs(&[0.5, 0.3, 0.15, 0.05], 4, 0.95);
        assert_eq!(out[3], 0.0);
        for (got, want) in out.iter().zip([10.0 / 19.0, 6.0 / 19.0, 3.0 / 19.0]) {
            assert!((got - want).abs() <= 1e-15);
        }
        assert_eq!(filter_probs(&[0.2, 0.4, 0.4], 1, 0.5), vec![0.0, 1.0, 0.0]);
        let p = [0.1, 0.2, 0.3, 0.4];
        for (a, b) in filter_probs(&p, 4, 1.0).iter().zip(p) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn banned_tokens_never_sampled() {
        let (m, v) = setup();
        let g = generate(&m, &v, "a red cat", &SamplingConfig { max_tokens: 8, ..Default::default() }).unwrap();
        for step in &g.trace {
            assert!(step.support.iter().all(|(i, _)| ![0, 1, 3].contains(i)));
            assert!(step.support.iter().any(|(i, _)| *i == step.token));
        }
        assert!(g.fine_prompt.starts_with("a red cat"));
    }

    #[test]
    fn zero_budget_and_determinism() {
        let (m, v) = setup();
        let cfg = SamplingConfig { max_tokens: 0, ..Default::default() };
        let g = generate(&m, &v, "a red cat", &cfg).unwrap();
        assert!(g.tokens.is_empty());
        assert_eq!(g.fine_prompt, "a red cat");
        let cfg = SamplingConfig { seed: 4, ..Default::default() };
        assert_eq!(generate(&m, &v, "a blue fish", &cfg).unwrap(), generate(&m, &v, "a blue fish", &cfg).unwrap());
        assert!(generate(&m, &v, "  ", &cfg).is_err());
    }

    #[test]
    fn session_protocol() {
        let (m, v) = setup();
        let mut s = start_session(&m, &v, "s1", "a green tree", &SamplingConfig::default()).unwrap();
        assert_eq!(s.status(), SessionStatus::AwaitingSelection);
        assert_eq!(s.rounds[0].candidates.len(), 3);
        assert!(matches!(continue_round(&m, &v, &mut s), Err(Error::SessionState(_))));
        assert!(matches!(select(&mut s, 3), Err(Error::CandidateIndex { index: 3, count: 3 })));
        let pick = s.rounds[0].candidates[1].clone();
        select_and_continue(&m, &v, &mut s, 1).unwrap();
        if s.status() != SessionStatus::Complete {
            for c in &s.rounds[1].candidates {
                assert!(c.tokens.starts_with(&pick.tokens));
                assert!(c.text.starts_with(&pick.text));
            }
        }
        assert_eq!(replay(&m, &v, &s).unwrap(), s);
    }

    #[test]
    fn swap_demo_untrained_is_identity() {
        let (m, v) = setup();
        let ck = Checkpoint {
            model: m,
            vocab: v,
            config: Default::default(),
            epoch: 0,
            optimizer: None,
        };
        let d = swap_encoder_demo(&ck, "a red cat", 3).unwrap();
        assert_eq!(d.initial, d.trained);
        assert!(d.feature_distance.abs() < 1e-12);
    }
}
