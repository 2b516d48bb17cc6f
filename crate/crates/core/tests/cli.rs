use clap::Parser;

use finegrain::cli::{run, run_interactive, AppConfig, Cli};
use finegrain::corpus::load_jsonl;
use finegrain::model::ModelDims;
use finegrain::trainer::{Checkpoint, TrainConfig};

fn run_args(args: &[&str]) {
    let mut all = vec!["finegrain"];
    all.extend_from_slice(args);
    run(Cli::try_parse_from(all).unwrap()).unwrap();
}

#[test]
fn dataset_train_refine_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let config = AppConfig {
        model: ModelDims { image_size: 32, ..ModelDims::tiny() },
        train: TrainConfig { batch_size: 4, epochs: 1, learning_rate: 1e-3, ..Default::default() },
        ..Default::default()
    };
    std::fs::write(p("config.json"), serde_json::to_string_pretty(&config).unwrap()).unwrap();

    run_args(&["build-dataset", "--records", "40", "--seed", "2", "--out", &p("data")]);
    let train = load_jsonl(p("data/train.jsonl")).unwrap();
    let test = load_jsonl(p("data/test.jsonl")).unwrap();
    let all = load_jsonl(p("data/corpus.jsonl")).unwrap();
    assert_eq!(train.len() + test.len(), all.len());
    assert!(std::fs::read_to_string(p("data/length_histogram.csv")).unwrap().starts_with("length,count,probability"));

    run_args(&[
        "--config", &p("config.json"),
        "train", "--data", &p("data/train.jsonl"), "--out", &p("model.ckpt"), "--loss-curve", &p("curve.csv"),
    ]);
    let ck = Checkpoint::load(p("model.ckpt")).unwrap();
    assert_eq!(ck.epoch, 1);
    assert_eq!(ck.model.dims, config.model);
    assert_eq!(std::fs::read_to_string(p("curve.csv")).unwrap().lines().count(), 2);

    run_args(&[
        "--config", &p("config.json"),
        "train", "--data", &p("data/train.jsonl"), "--out", &p("model2.ckpt"), "--resume", &p("model.ckpt"), "--epochs", "2",
    ]);
    assert_eq!(Checkpoint::load(p("model2.ckpt")).unwrap().epoch, 2);

    run_args(&["refine", "--checkpoint", &p("model2.ckpt"), "--seed", "3", "a red cat"]);
    run_args(&["analyze-lengths", "--data", &p("data/corpus.jsonl"), "--csv", &p("lengths.csv")]);
    assert!(std::fs::read_to_string(p("lengths.csv")).unwrap().contains("# short"));
    run_args(&[
        "analyze-lengths", "--data", &p("data/corpus.jsonl"), "--checkpoint", &p("model2.ckpt"),
        "--lengths", "2,6", "--samples", "2", "--csv", &p("ablation.csv"),
    ]);
    assert_eq!(std::fs::read_to_string(p("ablation.csv")).unwrap().lines().count(), 1 + 2 * 3);
    run_args(&[
        "eval", "--checkpoint", &format!("a={}", p("model.ckpt")), "--checkpoint", &format!("b={}", p("model2.ckpt")),
        "--data", &p("data/test.jsonl"), "--limit", "2", "--scorers", "sharpness", "--csv", &p("eval.csv"),
    ]);
    let eval = std::fs::read_to_string(p("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
    assert!(eval.contains("\nb,sharpness,"));

    let input = std::io::Cursor::new("9\n1\nq\n");
    let mut out = Vec::new();
    let picked = run_interactive(&ck, "a red cat", &Default::default(), input, &mut out).unwrap();
    let shown = String::from_utf8(out).unwrap();
    assert!(shown.contains("not a candidate number"));
    assert!(shown.contains("round 1"));
    assert!(picked.unwrap().starts_with("a red cat"));
}

#[test]
fn grad_check_subcommand() {
    run_args(&["grad-check", "--loss", "clip"]);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"train": {"batch_size": 1}}"#).unwrap();
    assert!(AppConfig::load(&path).is_err());
    std::fs::write(&path, r#"{"sampling": {"top_p": 0.8}}"#).unwrap();
    assert_eq!(AppConfig::load(&path).unwrap().sampling.top_p, 0.8);
}
