//! Briefly trains a model, then runs an iterative refinement session that
//! always picks the first candidate, and replays it from its log.
//!
//! `cargo run --example refine_session -- ["coarse prompt"]`

use finegrain::corpus::{generate_toy_world, toyworld::toy_vocabulary_words};
use finegrain::model::ModelDims;
use finegrain::sampler::{generate, replay, select_and_continue, start_session, SamplingConfig, SessionStatus};
use finegrain::textcore::Vocabulary;
use finegrain::trainer::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let prompt = std::env::args().nth(1).unwrap_or_else(|| "a red cat".into());
    let vocab = Vocabulary::from_words(toy_vocabulary_words());
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 1e-3,
        seed: 3,
        ..Default::default()
    };
    let mut trainer = Trainer::from_scratch(ModelDims::desk(), vocab, cfg)?;
    trainer.fit(&generate_toy_world(64, 3)?)?;
    let ckpt = trainer.checkpoint();

    let one_shot = SamplingConfig { seed: 11, ..Default::default() };
    println!("one-shot: {}", generate(&ckpt.model, &ckpt.vocab, &prompt, &one_shot)?.fine_prompt);

    let cfg = SamplingConfig { seed: 5, ..Default::default() };
    let mut session = start_session(&ckpt.model, &ckpt.vocab, "demo", &prompt, &cfg)?;
    while session.status() == SessionStatus::AwaitingSelection && session.rounds.len() < 4 {
        let round = session.rounds.last().unwrap();
        println!("\nround {}", session.rounds.len());
        for (i, c) in round.candidates.iter().enumerate() {
            println!("  [{i}] {}", c.text);
        }
        select_and_continue(&ckpt.model, &ckpt.vocab, &mut session, 0)?;
    }
    println!("\nlog:\n{}", serde_json::to_string(&session)?);
    let again = replay(&ckpt.model, &ckpt.vocab, &session)?;
    println!("\nreplay identical: {}", again == session);
    Ok(())
}
