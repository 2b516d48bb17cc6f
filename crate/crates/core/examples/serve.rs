//! Serves the refinement API with a freshly initialized checkpoint.
//!
//! `cargo run --example serve -- [port]`, then for example
//! `curl -XPOST localhost:8080/sessions -H 'content-type: application/json' -d '{"coarse_prompt":"a red cat"}'`

use finegrain::gateway::{serve, AppState, GatewayOptions};
use finegrain::model::{Model, ModelDims};
use finegrain::textcore::Vocabulary;
use finegrain::trainer::{Checkpoint, TrainConfig};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let port: u16 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(8080);
    let vocab = Vocabulary::from_words(finegrain::corpus::toyworld::toy_vocabulary_words());
    let ckpt = Checkpoint {
        model: Model::new(ModelDims::desk(), vocab.len(), 0)?,
        vocab,
        config: TrainConfig::default(),
        epoch: 0,
        optimizer: None,
    };
    let opts = GatewayOptions {
        session_log: Some("target/sessions.jsonl".into()),
        ..Default::default()
    };
    serve(AppState::new(Some(ckpt), opts)?, ([127, 0, 0, 1], port).into()).await?;
    Ok(())
}
