//! Command-line entry points.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    filter_nsfw, generate_toy_world, length_histogram, load_jsonl, split, store_jsonl, Bucket, KeywordNsfw,
    TripletRecord, DEFAULT_NSFW_THRESHOLD,
};
use crate::evalhub::{ablate_prompt_length, builtin_scorer, compare_models, Scorer};
use crate::gateway::{serve, AppState, GatewayOptions};
use crate::model::ModelDims;
use crate::sampler::{generate, select_and_continue, start_session, SamplingConfig, SessionStatus};
use crate::textcore::Vocabulary;
use crate::trainer::{grad_check, loss_curve_csv, pretrain_foundation, Ablation, Checkpoint, LossName, TrainConfig, Trainer};

/// Train split share matching 73,718 of 81,910 records.
pub const DEFAULT_SPLIT_RATIO: f64 = 73_718.0 / 81_910.0;

/// Contents of the `--config` JSON file. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default = "ModelDims::desk")]
    pub model: ModelDims,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            model: ModelDims::desk(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.sampling.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "finegrain", version, about = "Coarse-to-fine prompt refinement")]
pub struct Cli {
    /// JSON file with `model`, `train` and `sampling` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy-world corpus, filter it and split it.
    BuildDataset {
        #[arg(long, default_value_t = 1024)]
        records: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_NSFW_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_SPLIT_RATIO)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the refiner on a JSONL corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// full, wo-mse, wo-clip or wo-mse-clip.
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Joint warm-up epochs over all blocks before fine-tuning.
        #[arg(long, default_value_t = 0)]
        foundation_epochs: usize,
        #[arg(long, default_value_t = 3e-3)]
        foundation_lr: f64,
        #[arg(long)]
        loss_curve: Option<PathBuf>,
    },
    /// Refine a coarse prompt once, or step through rounds interactively.
    Refine {
        #[arg(long, env = "FINEGRAIN_CHECKPOINT")]
        checkpoint: PathBuf,
        prompt: String,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        interactive: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "FINEGRAIN_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "FINEGRAIN_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long)]
        session_log: Option<PathBuf>,
        #[arg(long)]
        no_thumbnails: bool,
    },
    /// Score refined prompts from one or more checkpoints (`label=path`).
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        /// Corpus whose coarse prompts are refined.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "short")]
        bucket: Bucket,
        #[arg(long, default_value_t = 32)]
        limit: usize,
        #[arg(long, value_delimiter = ',', default_value = "sharpness,colorfulness,keyword_coverage")]
        scorers: Vec<String>,
        #[arg(long, default_value_t = 20)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Word-length histograms of a corpus, or the prompt-length ablation
    /// when a checkpoint is given.
    AnalyzeLengths {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "FINEGRAIN_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10,12")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare loss gradients against finite differences on tiny dims.
    GradCheck {
        #[arg(long, value_delimiter = ',', default_value = "mse,sft,clip")]
        loss: Vec<LossName>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn write_out(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn image_base(data: &Path) -> PathBuf {
    data.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn build_dataset(records: usize, seed: u64, threshold: f64, ratio: f64, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let generated = generate_toy_world(records, seed)?;
    let outcome = filter_nsfw(generated, &KeywordNsfw::default(), threshold)?;
    let s = split(&outcome.retained, seed, ratio)?;
    let pick = |ids: &[String]| -> Vec<TripletRecord> {
        let set: std::collections::HashSet<&String> = ids.iter().collect();
        outcome.retained.iter().filter(|r| set.contains(&r.id)).cloned().collect()
    };
    store_jsonl(&outcome.retained, out.join("corpus.jsonl"))?;
    store_jsonl(&pick(&s.train), out.join("train.jsonl"))?;
    store_jsonl(&pick(&s.test), out.join("test.jsonl"))?;
    store_jsonl(&outcome.removed, out.join("removed.jsonl"))?;
    std::fs::write(out.join("split.json"), serde_json::to_string_pretty(&s)?)?;
    let fine: Vec<&str> = outcome.retained.iter().map(|r| r.fine_prompt.as_str()).collect();
    std::fs::write(out.join("length_histogram.csv"), length_histogram(&fine)?.to_csv())?;
    println!(
        "{} generated, {} retained, {} removed, {} quarantined; train {} / test {}",
        records,
        outcome.retained.len(),
        outcome.removed.len(),
        outcome.quarantined.len(),
        s.train.len(),
        s.test.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    app: &AppConfig,
    data: &Path,
    out: &Path,
    overrides: (Option<usize>, Option<f64>, Option<usize>, Option<u64>, Option<Ablation>),
    resume: Option<&Path>,
    foundation: (usize, f64),
    loss_curve: Option<&Path>,
) -> anyhow::Result<()> {
    let records = load_jsonl(data)?;
    let mut cfg = app.train.clone();
    let (epochs, lr, batch, seed, ablation) = overrides;
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = lr.unwrap_or(cfg.learning_rate);
    cfg.batch_size = batch.unwrap_or(cfg.batch_size);
    cfg.seed = seed.unwrap_or(cfg.seed);
    if let Some(a) = ablation {
        cfg = cfg.with_ablation(a);
    }
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut t = Trainer::from_checkpoint(ck)?;
            t.cfg = cfg;
            t
        }
        None => {
            let vocab = Vocabulary::from_texts(records.iter().map(|r| r.fine_prompt.as_str()));
            if foundation.0 > 0 {
                let model = pretrain_foundation(&records, app.model.clone(), vocab.clone(), cfg.seed, foundation.0, foundation.1)?;
                Trainer::new(model, vocab, cfg)?
            } else {
                Trainer::from_scratch(app.model.clone(), vocab, cfg)?
            }
        }
    };
    trainer.set_image_base(image_base(data));
    let start = std::time::Instant::now();
    let curve = trainer.fit_with(&records, |e| {
        log::info!(
            "epoch {} mse {:.4} sft {:.4} clip {:.4} total {:.4} ({:.1?})",
            e.epoch,
            e.loss.mse,
            e.loss.sft,
            e.loss.clip,
            e.loss.total,
            start.elapsed()
        );
    })?;
    trainer.checkpoint().save(out)?;
    if let Some(p) = loss_curve {
        std::fs::write(p, loss_curve_csv(&curve))?;
    }
    println!("saved {} after epoch {}", out.display(), trainer.epoch);
    Ok(())
}

/// Terminal loop: shows each round, reads a candidate number, `q` quits.
pub fn run_interactive(
    ckpt: &Checkpoint,
    prompt: &str,
    cfg: &SamplingConfig,
    input: impl BufRead,
    mut output: impl Write,
) -> anyhow::Result<Option<String>> {
    let mut session = start_session(&ckpt.model, &ckpt.vocab, "cli", prompt, cfg)?;
    let mut lines = input.lines();
    loop {
        let round = session.rounds.last().expect("session has a round");
        writeln!(output, "\nround {}: {}", session.rounds.len(), round.prefix)?;
        for (i, c) in round.candidates.iter().enumerate() {
            writeln!(output, "  [{}] {}{}", i + 1, c.text, if c.finished { "  (done)" } else { "" })?;
        }
        write!(output, "pick 1-{} or q: ", round.candidates.len())?;
        output.flush()?;
        let Some(line) = lines.next().transpose()? else {
            return Ok(session.selected_text().map(String::from));
        };
        let line = line.trim();
        if line == "q" {
            return Ok(session.selected_text().map(String::from));
        }
        let idx = match line.parse::<usize>() {
            Ok(n) if n >= 1 => n - 1,
            _ => {
                writeln!(output, "not a candidate number")?;
                continue;
            }
        };
        match select_and_continue(&ckpt.model, &ckpt.vocab, &mut session, idx) {
            Ok(()) => {}
            Err(crate::Error::CandidateIndex { .. }) => {
                writeln!(output, "not a candidate number")?;
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        if session.status() == SessionStatus::Complete {
            let text = session.selected_text().map(String::from);
            writeln!(output, "\nfinal: {}", text.as_deref().unwrap_or(""))?;
            return Ok(text);
        }
    }
}

fn scorers(names: &[String]) -> anyhow::Result<Vec<Box<dyn Scorer>>> {
    Ok(names.iter().map(|n| builtin_scorer(n.trim())).collect::<crate::Result<Vec<_>>>()?)
}

fn coarse_prompts(data: &Path, bucket: Bucket, limit: usize) -> anyhow::Result<Vec<String>> {
    let records = load_jsonl(data)?;
    let prompts = records
        .iter()
        .take(limit)
        .map(|r| r.coarse(bucket).map(String::from))
        .collect::<crate::Result<Vec<_>>>()?;
    if prompts.is_empty() {
        bail!("{} has no records", data.display());
    }
    Ok(prompts)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let app = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    match cli.command {
        Command::BuildDataset {
            records,
            seed,
            threshold,
            ratio,
            out,
        } => build_dataset(records, seed, threshold, ratio, &out),
        Command::Train {
            data,
            out,
            epochs,
            lr,
            batch_size,
            seed,
            ablation,
            resume,
            foundation_epochs,
            foundation_lr,
            loss_curve,
        } => train(
            &app,
            &data,
            &out,
            (epochs, lr, batch_size, seed, ablation),
            resume.as_deref(),
            (foundation_epochs, foundation_lr),
            loss_curve.as_deref(),
        ),
        Command::Refine {
            checkpoint,
            prompt,
            max_tokens,
            seed,
            interactive,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = SamplingConfig {
                max_tokens: max_tokens.unwrap_or(app.sampling.max_tokens),
                seed: seed.unwrap_or(app.sampling.seed),
                ..app.sampling.clone()
            };
            if interactive {
                let stdin = std::io::stdin();
                run_interactive(&ck, &prompt, &cfg, stdin.lock(), std::io::stdout())?;
            } else {
                println!("{}", generate(&ck.model, &ck.vocab, &prompt, &cfg)?.fine_prompt);
            }
            Ok(())
        }
        Command::Serve {
            checkpoint,
            port,
            host,
            session_log,
            no_thumbnails,
        } => {
            let ck = checkpoint.map(Checkpoint::load).transpose()?;
            if ck.is_none() {
                log::warn!("no checkpoint given; serving in degraded mode");
            }
            let opts = GatewayOptions {
                sampling: app.sampling.clone(),
                thumbnails: !no_thumbnails,
                thumbnail_size: ck.as_ref().map(|c| c.model.dims.image_size).unwrap_or(32),
                session_log,
            };
            let state = AppState::new(ck, opts)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, SocketAddr::new(host, port)))?;
            Ok(())
        }
        Command::Eval {
            checkpoints,
            data,
            bucket,
            limit,
            scorers: names,
            max_tokens,
            seed,
            csv,
        } => {
            let loaded = checkpoints
                .iter()
                .map(|arg| {
                    let (label, path) = arg.split_once('=').unwrap_or((arg.as_str(), arg.as_str()));
                    Ok((label.to_string(), Checkpoint::load(path)?))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let refs: Vec<(String, &Checkpoint)> = loaded.iter().map(|(l, c)| (l.clone(), c)).collect();
            let prompts = coarse_prompts(&data, bucket, limit)?;
            let report = compare_models(&refs, &scorers(&names)?, &prompts, max_tokens, seed)?;
            if report.untrained {
                log::warn!("at least one checkpoint has not been trained");
            }
            eprint!("{}", report.to_table());
            write_out(csv.as_deref(), &report.to_csv())
        }
        Command::AnalyzeLengths {
            data,
            checkpoint,
            lengths,
            samples,
            seed,
            csv,
        } => match checkpoint {
            None => {
                let records = load_jsonl(&data)?;
                let fine: Vec<&str> = records.iter().map(|r| r.fine_prompt.as_str()).collect();
                let mut text = String::from("# fine\n");
                text += &length_histogram(&fine)?.to_csv();
                for b in Bucket::ALL {
                    let coarse = records.iter().map(|r| r.coarse(b)).collect::<crate::Result<Vec<_>>>()?;
                    text += &format!("# {}\n", b.as_str());
                    text += &length_histogram(&coarse)?.to_csv();
                }
                write_out(csv.as_deref(), &text)
            }
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                let prompts = coarse_prompts(&data, Bucket::Short, samples)?;
                let all = crate::evalhub::builtin_scorers();
                let report = ablate_prompt_length(&lengths, &ck, &all, &prompts, samples, seed)?;
                if report.untrained {
                    log::warn!("checkpoint has not been trained; scores are not meaningful");
                }
                eprint!("{}", report.to_table());
                write_out(csv.as_deref(), &report.to_csv())
            }
        },
        Command::GradCheck { loss, seed } => {
            let dims = ModelDims::tiny();
            let mut worst: f64 = 0.0;
            for l in loss {
                let r = grad_check(l, &dims, seed)?;
                println!(
                    "{:<5} max rel error {:.3e} over {} scalars (worst block {})",
                    r.loss.to_string(),
                    r.max_rel_error,
                    r.scalars,
                    r.worst_block
                );
                worst = worst.max(r.max_rel_error);
            }
            if worst > 1e-4 {
                bail!("gradient check failed: {worst:.3e} > 1e-4");
            }
            Ok(())
        }
    }
}

/// Parses the process arguments and runs; errors go to stderr.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
