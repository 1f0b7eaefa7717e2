//! Subcommands behind the `ced` binary.
//!
//! Every command reads a [`RunConfig`] (TOML, optional) and applies
//! command-line overrides on top, then writes the resolved configuration to
//! `<out>/config.toml` so the run can be repeated from that file alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ced_core::corpus::{
    generate_synthetic_with_meta, ingest_jsonl, select, split_dataset, write_jsonl, DatasetSplit, GeneratorParams,
    Repost, RepostStream,
};
use ced_core::detect::{metrics_table, visible_steps, MetricsBundle};
use ced_core::trainer::{evaluate, evaluate_truncated, train};
use ced_core::{CedModel, TrainConfig, Variant};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Sweep percentages: 5%, 15%, ..., 95%.
pub const SWEEP_PERCENTS: [u32; 10] = [5, 15, 25, 35, 45, 55, 65, 75, 85, 95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// A JSONL file (split on the fly) or a directory holding
    /// `train.jsonl`, `val.jsonl` and `test.jsonl`.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Streams generated by `synth`.
    pub num_streams: usize,
    pub val_frac: f64,
    pub train_test_ratio: f64,
    /// Visible fraction of each test stream for `eval`.
    pub max_fraction: Option<f64>,
    /// Retrain on truncated streams at every sweep point.
    pub retrain: bool,
    /// Restricts `replay` to one stream.
    pub stream: Option<String>,
    pub train: TrainConfig,
    pub generator: GeneratorParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            num_streams: 1200,
            val_frac: 0.1,
            train_test_ratio: 3.0,
            max_fraction: None,
            retrain: false,
            stream: None,
            train: TrainConfig::default(),
            generator: GeneratorParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        let resolved = Self {
            train: self.train.resolved(),
            ..self.clone()
        };
        Ok(toml::to_string(&resolved)?)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ced",
    version,
    about = "Credible early detection of rumors from repost streams"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and batching.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Decision threshold.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSONL file or directory with train/val/test.jsonl.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Retrain on truncated data at each sweep point.
    #[arg(long, global = true)]
    pub retrain: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset split into train/val/test.
    Synth,
    /// Train a model and write its checkpoint and log.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Print per-step probabilities and decisions for test streams.
    Replay,
    /// Accuracy against the visible fraction of each stream.
    Sweep,
    /// Compare the CED, O1 and O2 objectives.
    Ablate,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(v) = self.variant {
            cfg.train = cfg.train.with_variant(v);
        }
        if let Some(a) = self.alpha {
            cfg.train.alpha = a;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        cfg.retrain |= self.retrain;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.common.resolve()?;
    run_command(cli.command, &cfg)
}

pub fn run_command(command: Command, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display()))?;
    write_file(&cfg.out.join("config.toml"), cfg.to_toml()?)?;
    match command {
        Command::Synth => cmd_synth(cfg).map(|_| ()),
        Command::Train => cmd_train(cfg).map(|_| ()),
        Command::Eval => cmd_eval(cfg).map(|_| ()),
        Command::Replay => cmd_replay(cfg),
        Command::Sweep => cmd_sweep(cfg).map(|_| ()),
        Command::Ablate => cmd_ablate(cfg).map(|_| ()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub num_streams: usize,
    pub params: GeneratorParams,
    pub counts: SplitCounts,
    pub rumor_fraction: f64,
    pub mean_reposts: f64,
    pub mean_changepoint_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthManifest> {
    let seed = cfg.train.seed;
    let corpus = generate_synthetic_with_meta(cfg.num_streams, seed, &cfg.generator)?;
    let split = split_dataset(&corpus.streams, seed, cfg.val_frac, cfg.train_test_ratio)?;
    let data = Dataset::from_split(&corpus.streams, &split)?;
    data.write_dir(&cfg.out)?;
    let rumors = corpus.streams.iter().filter(|s| s.is_rumor()).count();
    let manifest = SynthManifest {
        seed,
        num_streams: cfg.num_streams,
        params: cfg.generator.clone(),
        counts: data.counts(),
        rumor_fraction: rumors as f64 / corpus.streams.len() as f64,
        mean_reposts: corpus.mean_reposts(),
        mean_changepoint_fraction: corpus.mean_changepoint_fraction(),
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)?;
    log::info!("wrote {} streams to {}", cfg.num_streams, cfg.out.display());
    Ok(manifest)
}

/// Train, validation and test streams.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<RepostStream>,
    pub validation: Vec<RepostStream>,
    pub test: Vec<RepostStream>,
}

impl Dataset {
    fn from_split(streams: &[RepostStream], split: &DatasetSplit) -> Result<Self> {
        let pick =
            |ids: &[String]| -> Result<Vec<RepostStream>> { Ok(select(streams, ids)?.into_iter().cloned().collect()) };
        Ok(Self {
            train: pick(&split.train)?,
            validation: pick(&split.validation)?,
            test: pick(&split.test)?,
        })
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train.len(),
            validation: self.validation.len(),
            test: self.test.len(),
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        write_jsonl(dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(dir.join(VALIDATION_FILE), &self.validation)?;
        write_jsonl(dir.join(TEST_FILE), &self.test)?;
        Ok(())
    }

    /// Loads `cfg.data`. A single file is split 10% validation and 3:1
    /// train:test (by default) and the split is recorded in
    /// `<out>/split.json`.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let Some(path) = &cfg.data else {
            bail!("no data path given (use --data or `data` in the config)");
        };
        if !path.exists() {
            bail!("data path {} does not exist", path.display());
        }
        if path.is_dir() {
            let read = |name: &str| -> Result<Vec<RepostStream>> {
                let p = path.join(name);
                let ing = ingest_jsonl(&p).with_context(|| format!("cannot load {}", p.display()))?;
                Ok(ing.streams)
            };
            return Ok(Self {
                train: read(TRAIN_FILE)?,
                validation: read(VALIDATION_FILE)?,
                test: read(TEST_FILE)?,
            });
        }
        let ing = ingest_jsonl(path).with_context(|| format!("cannot load {}", path.display()))?;
        if ing.skipped_empty > 0 {
            log::warn!(
                "{}: skipped {} streams without reposts",
                path.display(),
                ing.skipped_empty
            );
        }
        let split = split_dataset(&ing.streams, cfg.train.seed, cfg.val_frac, cfg.train_test_ratio)?;
        fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display()))?;
        write_json(&cfg.out.join("split.json"), &split)?;
        Self::from_split(&ing.streams, &split)
    }
}

fn refs(streams: &[RepostStream]) -> Vec<&RepostStream> {
    streams.iter().collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_step: u64,
    pub best_validation_accuracy: f64,
    pub steps: u64,
    pub stopped_early: bool,
    pub config_hash: String,
}

fn train_model(cfg: &TrainConfig, data: &Dataset) -> Result<ced_core::trainer::TrainOutcome> {
    Ok(train(&refs(&data.train), &refs(&data.validation), cfg)?)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let data = Dataset::load(cfg)?;
    let outcome = train_model(&cfg.train, &data)?;
    let ckpt = cfg.checkpoint_path();
    outcome
        .model
        .save(&ckpt, outcome.best_step)
        .with_context(|| format!("cannot write checkpoint {}", ckpt.display()))?;
    outcome.log.write_csv(cfg.out.join("train_log.csv"))?;
    let summary = TrainSummary {
        best_step: outcome.best_step,
        best_validation_accuracy: outcome.best_accuracy,
        steps: outcome.steps,
        stopped_early: outcome.stopped_early,
        config_hash: outcome.model.config.hash(),
    };
    write_json(&cfg.out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

fn load_model(cfg: &RunConfig) -> Result<CedModel> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let (model, _) = CedModel::load(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    Ok(model)
}

/// Detection threshold for evaluation: `--alpha` or the config, which
/// defaults to the value the model was trained with.
fn eval_alpha(cfg: &RunConfig) -> f64 {
    cfg.train.alpha
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsBundle> {
    let model = load_model(cfg)?;
    let data = Dataset::load(cfg)?;
    let (outcomes, metrics) = evaluate_truncated(&model, &refs(&data.test), eval_alpha(cfg), cfg.max_fraction)?;
    write_json(&cfg.out.join("metrics.json"), &metrics)?;
    let name = model.config.variant.to_string();
    let table = metrics_table(&[(name, &metrics)]);
    print!("{table}");
    write_file(&cfg.out.join("metrics.txt"), table)?;
    let mut lines = String::new();
    for o in &outcomes {
        lines.push_str(&serde_json::to_string(o)?);
        lines.push('\n');
    }
    write_file(&cfg.out.join("outcomes.jsonl"), lines)?;
    Ok(metrics)
}

pub fn cmd_replay(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let data = Dataset::load(cfg)?;
    let streams: Vec<&RepostStream> = match &cfg.stream {
        Some(id) => {
            let all: Vec<RepostStream> = [&data.train[..], &data.validation[..], &data.test[..]].concat();
            let found = all.iter().find(|s| &s.id == id).cloned();
            match found {
                Some(s) => return replay_streams(cfg, &model, &[&s]),
                None => bail!("stream {id:?} not found in {}", cfg.data.as_ref().unwrap().display()),
            }
        }
        None => refs(&data.test),
    };
    replay_streams(cfg, &model, &streams)
}

fn replay_streams(cfg: &RunConfig, model: &CedModel, streams: &[&RepostStream]) -> Result<()> {
    let alpha = eval_alpha(cfg);
    let mut text = String::new();
    for s in streams {
        let o = ced_core::detect::detect_stream(s, model, alpha, cfg.max_fraction)?;
        let _ = writeln!(text, "{} label={} intervals={}", s.id, s.label, o.total_steps);
        for (i, p) in o.prob_curve.iter().enumerate() {
            let _ = writeln!(text, "  step {:>3}  p(rumor)={p:.4}", i + 1);
        }
        let _ = writeln!(
            text,
            "  -> {:?} at step {}/{} ({})",
            o.verdict,
            o.detection_step,
            o.total_steps,
            if o.decided_early { "threshold" } else { "forced" }
        );
    }
    print!("{text}");
    write_file(&cfg.out.join("replay.txt"), text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub percent: u32,
    pub metrics: MetricsBundle,
}

/// Keeps the reposts of the first `ceil(f * |F|)` intervals.
pub fn truncate_stream(stream: &RepostStream, interval_size: usize, fraction: f64) -> RepostStream {
    let total = stream.num_intervals(interval_size);
    let keep = visible_steps(total, Some(fraction)) * interval_size;
    let reposts: Vec<Repost> = stream.reposts.iter().take(keep).cloned().collect();
    RepostStream {
        reposts,
        ..stream.clone()
    }
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let data = Dataset::load(cfg)?;
    let alpha = eval_alpha(cfg);
    let test = refs(&data.test);
    let base = if cfg.retrain {
        None
    } else if cfg.checkpoint_path().exists() {
        Some(load_model(cfg)?)
    } else {
        log::info!("no checkpoint at {}; training one", cfg.checkpoint_path().display());
        Some(train_model(&cfg.train, &data)?.model)
    };
    let mut rows = Vec::with_capacity(SWEEP_PERCENTS.len());
    for pct in SWEEP_PERCENTS {
        let f = f64::from(pct) / 100.0;
        let metrics = match &base {
            Some(model) => evaluate_truncated(model, &test, alpha, Some(f))?.1,
            None => {
                let n = cfg.train.interval_size;
                let cut = |v: &[RepostStream]| v.iter().map(|s| truncate_stream(s, n, f)).collect::<Vec<_>>();
                let truncated = Dataset {
                    train: cut(&data.train),
                    validation: cut(&data.validation),
                    test: data.test.clone(),
                };
                let model = train_model(&cfg.train, &truncated)?.model;
                evaluate_truncated(&model, &test, alpha, Some(f))?.1
            }
        };
        log::info!("sweep {pct}%: acc {:.4}", metrics.accuracy);
        rows.push(SweepRow { percent: pct, metrics });
    }
    write_file(&cfg.out.join("sweep.csv"), sweep_csv(&rows))?;
    write_json(&cfg.out.join("sweep.json"), &rows)?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("percent,accuracy,precision,recall,f1,early_rate\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.percent, m.accuracy, m.rumor.precision, m.rumor.recall, m.rumor.f1, m.early_rate
        );
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub metrics: MetricsBundle,
}

/// Ablation rows: the full objective and the two reduced ones, sharing
/// the CNN architecture and every other setting.
pub const ABLATION: [(&str, Variant); 3] = [("CED", Variant::CedCnn), ("O1", Variant::O1), ("O2", Variant::O2)];

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let data = Dataset::load(cfg)?;
    let alpha = eval_alpha(cfg);
    let mut rows = Vec::with_capacity(ABLATION.len());
    for (name, variant) in ABLATION {
        let train_cfg = TrainConfig {
            variant,
            ..cfg.train.clone()
        };
        let outcome = train_model(&train_cfg, &data)?;
        let (_, metrics) = evaluate(&outcome.model, &refs(&data.test), alpha)?;
        log::info!(
            "ablation {name}: acc {:.4} er {:.4}",
            metrics.accuracy,
            metrics.early_rate
        );
        rows.push(AblationRow {
            method: name.to_string(),
            metrics,
        });
    }
    let table: Vec<(String, &MetricsBundle)> = rows.iter().map(|r| (r.method.clone(), &r.metrics)).collect();
    let text = metrics_table(&table);
    print!("{text}");
    write_file(&cfg.out.join("ablation.txt"), &text)?;
    let mut csv = String::from("method,accuracy,precision,recall,f1,early_rate\n");
    for r in &rows {
        let m = &r.metrics;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.method, m.accuracy, m.rumor.precision, m.rumor.recall, m.rumor.f1, m.early_rate
        );
    }
    write_file(&cfg.out.join("ablation.csv"), csv)?;
    Ok(rows)
}
