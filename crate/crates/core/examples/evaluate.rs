//! Scores refined prompts: the prompt-length ablation on one checkpoint,
//! then a loss-ablation comparison table and the candidate-diversity proxy.
//!
//! `cargo run --example evaluate`

use finegrain::corpus::{generate_toy_world, toyworld::toy_vocabulary_words, Bucket};
use finegrain::evalhub::{ablate_prompt_length, afem_diversity_report, builtin_scorers, compare_models, train_ablations};
use finegrain::model::{Model, ModelDims};
use finegrain::sampler::SamplingConfig;
use finegrain::textcore::Vocabulary;
use finegrain::trainer::{Ablation, TrainConfig};

fn main() -> anyhow::Result<()> {
    let records = generate_toy_world(64, 4)?;
    let vocab = Vocabulary::from_words(toy_vocabulary_words());
    let base = Model::new(ModelDims::desk(), vocab.len(), 4)?;
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 1e-3,
        seed: 4,
        ..Default::default()
    };
    let runs = train_ablations(&records, &base, &vocab, &cfg, &Ablation::ALL)?;
    let prompts: Vec<String> = records.iter().take(8).map(|r| r.coarse(Bucket::Short).map(String::from)).collect::<Result<_, _>>()?;
    let scorers = builtin_scorers();

    let lengths = ablate_prompt_length(&[2, 4, 6, 8, 10, 12], &runs[0].1, &scorers, &prompts, 8, 0)?;
    println!("prompt length ablation\n{}", lengths.to_table());

    let refs: Vec<(String, _)> = runs.iter().map(|(l, c)| (l.clone(), c)).collect();
    let table = compare_models(&refs, &scorers, &prompts, 20, 0)?;
    println!("loss ablation\n{}", table.to_table());
    println!("{}", table.to_csv());

    let div = afem_diversity_report(&refs, &prompts, &SamplingConfig::default())?;
    println!("candidate diversity (proxy)\n{}", div.to_table());
    Ok(())
}
