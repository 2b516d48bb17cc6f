//! Trains the desk-scale model on a synthetic toy-world corpus and writes a
//! checkpoint plus the loss curve.
//!
//! `cargo run --example train_toy -- [records] [epochs] [learning_rate] [out_dir]`

use finegrain::corpus::{generate_toy_world, toyworld::toy_vocabulary_words};
use finegrain::model::ModelDims;
use finegrain::textcore::Vocabulary;
use finegrain::trainer::{loss_curve_csv, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map(|s| s.parse()).transpose()?.unwrap_or(256);
    let epochs: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let lr: f64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1e-3);
    let out = std::path::PathBuf::from(args.get(3).cloned().unwrap_or_else(|| "target/toy-run".into()));
    std::fs::create_dir_all(&out)?;

    let records = generate_toy_world(n, 42)?;
    let vocab = Vocabulary::from_words(toy_vocabulary_words());
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        seed: 42,
        ..Default::default()
    };
    let mut trainer = Trainer::from_scratch(ModelDims::desk(), vocab, cfg)?;
    let start = std::time::Instant::now();
    let curve = trainer.fit_with(&records, |e| {
        println!(
            "epoch {:>3}  mse {:.4}  sft {:.4}  clip {:.4}  total {:.4}  ({:.1?})",
            e.epoch, e.loss.mse, e.loss.sft, e.loss.clip, e.loss.total, start.elapsed()
        );
    })?;
    std::fs::write(out.join("loss_curve.csv"), loss_curve_csv(&curve))?;
    trainer.checkpoint().save(out.join("model.ckpt"))?;
    println!("wrote {}", out.display());
    Ok(())
}
