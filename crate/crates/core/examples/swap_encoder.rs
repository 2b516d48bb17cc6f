//! Plug-and-play encoder swap: the toy reverse diffusion run conditioned on
//! the initial text encoder and on the trained one, same noise seed.
//!
//! `cargo run --example swap_encoder -- ["prompt"] [out_dir]`

use finegrain::corpus::{generate_toy_world, toyworld::toy_vocabulary_words};
use finegrain::model::ModelDims;
use finegrain::sampler::swap_encoder_demo;
use finegrain::textcore::Vocabulary;
use finegrain::trainer::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let prompt = args.first().cloned().unwrap_or_else(|| "a blue boat by the sea".into());
    let out = std::path::PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "target/swap".into()));
    std::fs::create_dir_all(&out)?;

    let vocab = Vocabulary::from_words(toy_vocabulary_words());
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 1e-3,
        seed: 2,
        ..Default::default()
    };
    let mut trainer = Trainer::from_scratch(ModelDims::desk(), vocab, cfg)?;
    trainer.fit(&generate_toy_world(64, 2)?)?;

    let demo = swap_encoder_demo(&trainer.checkpoint(), &prompt, 9)?;
    demo.initial.save_png(out.join("initial_encoder.png"))?;
    demo.trained.save_png(out.join("trained_encoder.png"))?;
    println!("conditioning distance (1 - cos): {:.4}", demo.feature_distance);
    println!("wrote {}", out.display());
    Ok(())
}
