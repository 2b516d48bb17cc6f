//! Scorer plugins, the prompt-length ablation, candidate diversity and
//! model comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::afem::ImagePooling;
use crate::corpus::toyworld::{COLORS, MODIFIERS, OBJECTS, SCENES, STYLES};
use crate::corpus::{render_prompt, TripletRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::raster::Image;
use crate::sampler::{generate, start_session, SamplingConfig};
use crate::seeds::seed_of;
use crate::tensor::cosine;
use crate::textcore::{split_words, Vocabulary};
use crate::trainer::{Ablation, Checkpoint, TrainConfig, Trainer};

/// What a scorer sees: the rendered image and the prompt behind it.
pub struct ScoreInput<'a> {
    pub image: &'a Image,
    pub prompt: &'a str,
}

pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    /// Inclusive bounds every score must respect.
    fn range(&self) -> (f64, f64);
    fn score(&self, input: &ScoreInput) -> std::result::Result<f64, String>;
}

/// Runs `scorer`, turning failures and out-of-range values into errors.
pub fn checked_score(scorer: &dyn Scorer, input: &ScoreInput) -> Result<f64> {
    let v = scorer
        .score(input)
        .map_err(|e| Error::PluginContract(format!("{} failed: {e}", scorer.name())))?;
    let (lo, hi) = scorer.range();
    if !(v >= lo && v <= hi) {
        return Err(Error::PluginContract(format!(
            "{} returned {v}, outside [{lo}, {hi}]",
            scorer.name()
        )));
    }
    Ok(v)
}

fn luminance(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Mean absolute luminance difference between horizontal and vertical
/// neighbours.
pub struct Sharpness;

impl Scorer for Sharpness {
    fn name(&self) -> &str {
        "sharpness"
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn score(&self, input: &ScoreInput) -> std::result::Result<f64, String> {
        let img = input.image;
        let (h, w) = (img.height(), img.width());
        if h < 2 || w < 2 {
            return Err("image too small".into());
        }
        let mut total = 0.0;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                let l = luminance(img.pixel(y, x).map(|v| v.clamp(0.0, 1.0)));
                if x + 1 < w {
                    total += (luminance(img.pixel(y, x + 1).map(|v| v.clamp(0.0, 1.0))) - l).abs();
                    n += 1;
                }
                if y + 1 < h {
                    total += (luminance(img.pixel(y + 1, x).map(|v| v.clamp(0.0, 1.0))) - l).abs();
                    n += 1;
                }
            }
        }
        Ok(total / n as f64)
    }
}

/// Opponent-channel spread plus mean, on `[0, 1]` channels.
pub struct Colorfulness;

impl Scorer for Colorfulness {
    fn name(&self) -> &str {
        "colorfulness"
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 2.0)
    }

    fn score(&self, input: &ScoreInput) -> std::result::Result<f64, String> {
        let img = input.image;
        let n = (img.height() * img.width()) as f64;
        if n == 0.0 {
            return Err("empty image".into());
        }
        let (mut rg, mut yb) = (Vec::new(), Vec::new());
        for y in 0..img.height() {
            for x in 0..img.width() {
                let [r, g, b] = img.pixel(y, x).map(|v| v.clamp(0.0, 1.0));
                rg.push(r - g);
                yb.push(0.5 * (r + g) - b);
            }
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            (m, var)
        };
        let (m1, v1) = stats(&rg);
        let (m2, v2) = stats(&yb);
        Ok((v1 + v2).sqrt() + 0.3 * (m1 * m1 + m2 * m2).sqrt())
    }
}

/// Fraction of the five toy-world attribute groups (colour, object, scene,
/// style, modifier) that the prompt mentions.
pub struct KeywordCoverage;

impl Scorer for KeywordCoverage {
    fn name(&self) -> &str {
        "keyword_coverage"
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn score(&self, input: &ScoreInput) -> std::result::Result<f64, String> {
        let text = format!(" {} ", split_words(input.prompt).join(" "));
        let has = |words: Vec<&str>| {
            words.iter().any(|w| text.contains(&format!(" {} ", split_words(w).join(" "))))
        };
        let groups = [
            has(COLORS.iter().map(|c| c.0).collect()),
            has(OBJECTS.iter().map(|o| o.0).collect()),
            has(SCENES.iter().map(|s| s.1).collect()),
            has(STYLES.iter().map(|s| s.1).collect()),
            has(MODIFIERS.to_vec()),
        ];
        Ok(groups.iter().filter(|&&g| g).count() as f64 / groups.len() as f64)
    }
}

/// Built-in scorers by name.
pub fn builtin_scorer(name: &str) -> Result<Box<dyn Scorer>> {
    match name {
        "sharpness" => Ok(Box::new(Sharpness)),
        "colorfulness" => Ok(Box::new(Colorfulness)),
        "keyword_coverage" => Ok(Box::new(KeywordCoverage)),
        _ => Err(Error::Config(format!("unknown scorer `{name}`"))),
    }
}

pub fn builtin_scorers() -> Vec<Box<dyn Scorer>> {
    vec![Box::new(Sharpness), Box::new(Colorfulness), Box::new(KeywordCoverage)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

impl CellStats {
    /// Population statistics; `None` for an empty slice.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            stddev: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub setting: String,
    pub scorer: String,
    /// `None` when every sample failed for this scorer.
    pub stats: Option<CellStats>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub seed: u64,
    pub cells: Vec<ReportCell>,
    /// Set when the evaluated checkpoint never trained.
    pub untrained: bool,
}

/// Quotes a CSV field when it holds a comma, quote or newline.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

impl AblationReport {
    /// `setting,scorer,mean,stddev,count`; failed cells show `error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,scorer,mean,stddev,count\n");
        for c in &self.cells {
            let (setting, scorer) = (csv_field(&c.setting), csv_field(&c.scorer));
            match c.stats {
                Some(s) => writeln!(out, "{setting},{scorer},{},{},{}", fmt_num(s.mean), fmt_num(s.stddev), s.count),
                None => writeln!(out, "{setting},{scorer},error,error,0"),
            }
            .unwrap();
        }
        out
    }

    pub fn cell(&self, setting: &str, scorer: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.setting == setting && c.scorer == scorer)
    }

    /// Fixed-width table with one row per setting, one column per scorer.
    pub fn to_table(&self) -> String {
        let mut settings: Vec<&str> = Vec::new();
        let mut scorers: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !settings.contains(&c.setting.as_str()) {
                settings.push(&c.setting);
            }
            if !scorers.contains(&c.scorer.as_str()) {
                scorers.push(&c.scorer);
            }
        }
        let mut out = format!("{:<16}", self.axis);
        for s in &scorers {
            write!(out, " {s:>22}").unwrap();
        }
        out.push('\n');
        for setting in settings {
            write!(out, "{setting:<16}").unwrap();
            for scorer in &scorers {
                let text = match self.cell(setting, scorer).and_then(|c| c.stats) {
                    Some(s) => format!("{:.4} ± {:.4} (n={})", s.mean, s.stddev, s.count),
                    None => "error".into(),
                };
                write!(out, " {text:>22}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Mean over settings of each scorer's cell means, failed cells skipped.
    pub fn column_means(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for c in &self.cells {
            if let Some(s) = c.stats {
                let e = acc.entry(c.scorer.clone()).or_default();
                e.0 += s.mean;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
    }
}

/// Renders `prompt` with the toy renderer and scores it with every scorer.
fn score_all(scorers: &[Box<dyn Scorer>], prompt: &str, seed: u64, size: usize) -> Vec<Result<f64>> {
    let image = render_prompt(prompt, seed, size, size);
    let input = ScoreInput { image: &image, prompt };
    scorers.iter().map(|s| checked_score(s.as_ref(), &input)).collect()
}

fn collect_cells(setting: &str, scorers: &[Box<dyn Scorer>], results: &[Vec<Result<f64>>]) -> Vec<ReportCell> {
    scorers
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let values: Vec<f64> = results.iter().filter_map(|r| r[j].as_ref().ok().copied()).collect();
            let failures = results.len() - values.len();
            for r in results {
                if let Err(e) = &r[j] {
                    log::warn!("{setting}: {e}");
                }
            }
            ReportCell {
                setting: setting.to_string(),
                scorer: s.name().to_string(),
                stats: CellStats::from_values(&values),
                failures,
            }
        })
        .collect()
}

/// For each extra-token budget, refines `n_samples` coarse prompts (cycling
/// through `prompts`), renders the results and scores them.
pub fn ablate_prompt_length(
    lengths: &[usize],
    ckpt: &Checkpoint,
    scorers: &[Box<dyn Scorer>],
    prompts: &[String],
    n_samples: usize,
    seed: u64,
) -> Result<AblationReport> {
    if lengths.is_empty() || prompts.is_empty() || n_samples == 0 || scorers.is_empty() {
        return Err(Error::Config("ablation needs lengths, prompts, samples and scorers".into()));
    }
    let size = ckpt.model.dims.image_size;
    let mut cells = Vec::new();
    for &len in lengths {
        let mut results = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let s = seed_of(seed, len as u64, i as u64);
            let cfg = SamplingConfig {
                max_tokens: len,
                seed: s,
                ..Default::default()
            };
            let g = generate(&ckpt.model, &ckpt.vocab, &prompts[i % prompts.len()], &cfg)?;
            results.push(score_all(scorers, &g.fine_prompt, s, size));
        }
        cells.extend(collect_cells(&len.to_string(), scorers, &results));
    }
    Ok(AblationReport {
        axis: "prompt_length".into(),
        seed,
        cells,
        untrained: ckpt.epoch == 0,
    })
}

/// Mean pairwise `1 - Jaccard` over word sets, averaged over candidate sets.
pub fn diversity_metric<S: AsRef<str>>(candidate_sets: &[Vec<S>]) -> Result<f64> {
    if candidate_sets.is_empty() {
        return Err(Error::Config("no candidate sets".into()));
    }
    let mut total = 0.0;
    for set in candidate_sets {
        if set.len() < 2 {
            return Err(Error::Config("diversity needs at least two candidates per set".into()));
        }
        let words: Vec<BTreeSet<String>> = set.iter().map(|c| split_words(c.as_ref()).into_iter().collect()).collect();
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..words.len() {
            for j in i + 1..words.len() {
                let inter = words[i].intersection(&words[j]).count();
                let union = words[i].union(&words[j]).count();
                let sim = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
                sum += 1.0 - sim;
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / candidate_sets.len() as f64)
}

/// Diversity of the first-round candidates for each prompt.
pub fn candidate_diversity(model: &Model, vocab: &Vocabulary, prompts: &[String], cfg: &SamplingConfig) -> Result<f64> {
    let sets = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = SamplingConfig {
                seed: seed_of(cfg.seed, i as u64, 0),
                ..cfg.clone()
            };
            let s = start_session(model, vocab, format!("div-{i}"), p, &c)?;
            Ok(s.rounds[0].candidates.iter().map(|c| c.text.clone()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    diversity_metric(&sets)
}

/// One row per checkpoint with the candidate-diversity proxy under the
/// `diversity_proxy` scorer column. Axis is `afem`.
pub fn afem_diversity_report(
    models: &[(String, &Checkpoint)],
    prompts: &[String],
    cfg: &SamplingConfig,
) -> Result<AblationReport> {
    if models.is_empty() {
        return Err(Error::Config("afem_diversity_report needs at least one checkpoint".into()));
    }
    let cells = models
        .iter()
        .map(|(label, ckpt)| {
            let d = candidate_diversity(&ckpt.model, &ckpt.vocab, prompts, cfg)?;
            Ok(ReportCell {
                setting: label.clone(),
                scorer: "diversity_proxy".into(),
                stats: CellStats::from_values(&[d]).map(|s| CellStats { count: prompts.len(), ..s }),
                failures: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        axis: "afem".into(),
        seed: cfg.seed,
        cells,
        untrained: models.iter().any(|(_, c)| c.epoch == 0),
    })
}

/// Cosine between the pooled features of two images, adaptive and mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingContrast {
    pub adaptive_cosine: f64,
    pub mean_cosine: f64,
}

pub fn pooling_contrast(model: &Model, a: &Image, b: &Image) -> Result<PoolingContrast> {
    let cos = |mode| -> Result<f64> {
        let fa = model.image_feature(a, mode)?;
        let fb = model.image_feature(b, mode)?;
        cosine(&fa.0, &fb.0).ok_or_else(|| Error::ZeroNorm("image".into()))
    };
    Ok(PoolingContrast {
        adaptive_cosine: cos(ImagePooling::Adaptive)?,
        mean_cosine: cos(ImagePooling::Mean)?,
    })
}

/// Rows = models, columns = scorers; each model refines the same prompts.
pub fn compare_models(
    models: &[(String, &Checkpoint)],
    scorers: &[Box<dyn Scorer>],
    prompts: &[String],
    max_tokens: usize,
    seed: u64,
) -> Result<AblationReport> {
    if models.is_empty() {
        return Err(Error::Config("compare_models needs at least one checkpoint".into()));
    }
    if prompts.is_empty() || scorers.is_empty() {
        return Err(Error::Config("compare_models needs prompts and scorers".into()));
    }
    let mut cells = Vec::new();
    for (label, ckpt) in models {
        let mut results = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            let s = seed_of(seed, i as u64, 0);
            let cfg = SamplingConfig {
                max_tokens,
                seed: s,
                ..Default::default()
            };
            let g = generate(&ckpt.model, &ckpt.vocab, p, &cfg)?;
            results.push(score_all(scorers, &g.fine_prompt, s, ckpt.model.dims.image_size));
        }
        cells.extend(collect_cells(label, scorers, &results));
    }
    Ok(AblationReport {
        axis: "model".into(),
        seed,
        cells,
        untrained: models.iter().any(|(_, c)| c.epoch == 0),
    })
}

/// Trains one model per loss configuration from the same initialization.
pub fn train_ablations(
    records: &[TripletRecord],
    base: &Model,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    ablations: &[Ablation],
) -> Result<Vec<(String, Checkpoint)>> {
    ablations
        .iter()
        .map(|&a| {
            let mut t = Trainer::new(base.clone(), vocab.clone(), cfg.clone().with_ablation(a))?;
            t.fit(records)?;
            Ok((a.label().to_string(), t.checkpoint()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toyworld::toy_vocabulary_words;
    use crate::model::ModelDims;

    struct Broken;
    impl Scorer for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn range(&self) -> (f64, f64) {
            (0.0, 1.0)
        }
        fn score(&self, _: &ScoreInput) -> std::result::Result<f64, String> {
            Ok(7.0)
        }
    }

    #[test]
    fn crisp_beats_blurry() {
        let crisp = render_prompt("a white house, pixel art", 1, 32, 32);
        let blurry = render_prompt("a white house, watercolor, soft focus", 1, 32, 32);
        let s = |img: &Image| Sharpness.score(&ScoreInput { image: img, prompt: "" }).unwrap();
        assert!(s(&crisp) > s(&blurry));
    }

    #[test]
    fn range_is_enforced() {
        let img = Image::new(4, 4);
        let input = ScoreInput { image: &img, prompt: "x" };
        assert!(matches!(checked_score(&Broken, &input), Err(Error::PluginContract(_))));
        assert_eq!(checked_score(&Sharpness, &input).unwrap(), 0.0);
    }

    #[test]
    fn keyword_coverage_counts_groups() {
        let img = Image::new(4, 4);
        let s = |p: &str| KeywordCoverage.score(&ScoreInput { image: &img, prompt: p }).unwrap();
        assert_eq!(s("nothing here"), 0.0);
        assert_eq!(s("a red cat"), 0.4);
    }

    #[test]
    fn diversity_values() {
        assert_eq!(csv_field("wo L_mse,clip"), "\"wo L_mse,clip\"");
        assert_eq!(diversity_metric(&[vec!["a b", "a b"]]).unwrap(), 0.0);
        assert_eq!(diversity_metric(&[vec!["a b", "c d"]]).unwrap(), 1.0);
        // {a,b,c} vs {b,c,d}: jaccard 2/4.
        assert_eq!(diversity_metric(&[vec!["a b c", "b c d"]]).unwrap(), 0.5);
        assert!(diversity_metric(&[vec!["a"]]).is_err());
    }

    #[test]
    fn report_csv_and_failures() {
        let vocab = Vocabulary::from_words(toy_vocabulary_words());
        let ck = Checkpoint {
            model: Model::new(ModelDims { image_size: 32, ..ModelDims::tiny() }, vocab.len(), 1).unwrap(),
            vocab,
            config: Default::default(),
            epoch: 0,
            optimizer: None,
        };
        let scorers: Vec<Box<dyn Scorer>> = vec![Box::new(Sharpness), Box::new(Broken)];
        let prompts = vec!["a red cat".to_string()];
        let r = ablate_prompt_length(&[6], &ck, &scorers, &prompts, 1, 3).unwrap();
        assert!(r.untrained);
        let csv = r.to_csv();
        assert!(csv.starts_with("setting,scorer,mean,stddev,count\n6,sharpness,"));
        assert!(csv.contains("6,broken,error,error,0"));
        assert_eq!(r, ablate_prompt_length(&[6], &ck, &scorers, &prompts, 1, 3).unwrap());
    }
}
