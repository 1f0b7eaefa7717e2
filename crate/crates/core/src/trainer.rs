//! Mini-batch Adam training with periodic validation and best-model
//! selection.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::RepostStream;
use crate::detect::{compute_metrics, detect_all, outcome_from_curve, DetectionOutcome, MetricsBundle};
use crate::error::{CedError, Result};
use crate::model::{CedModel, PreparedStream};
use crate::numerics::{AdamConfig, AdamState, Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub split: Split,
    pub accuracy: f64,
    pub early_rate: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,split,accuracy,early_rate,loss";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                r.split.as_str(),
                r.accuracy,
                r.early_rate,
                r.loss
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| CedError::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation evaluation.
    pub model: CedModel,
    pub best_step: u64,
    pub best_accuracy: f64,
    pub steps: u64,
    pub stopped_early: bool,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        self.model.to_checkpoint_bytes(self.best_step)
    }
}

/// Loss, accuracy and early rate of one pass over `streams` without
/// updating parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassSummary {
    pub loss: f64,
    pub accuracy: f64,
    pub early_rate: f64,
}

#[derive(Default)]
struct Running {
    loss: f64,
    correct: usize,
    fraction: f64,
    n: usize,
}

impl Running {
    fn push(&mut self, model: &CedModel, p: &PreparedStream, loss: f64, probs: &[f64]) {
        let o = outcome_from_curve(&p.id, probs, probs.len(), model.config.alpha, model.is_full_sequence());
        self.loss += loss;
        self.correct += usize::from(o.verdict.label() == p.label);
        self.fraction += o.fraction();
        self.n += 1;
    }

    fn summary(&self) -> PassSummary {
        let n = self.n.max(1) as f64;
        PassSummary {
            loss: self.loss / n,
            accuracy: self.correct as f64 / n,
            early_rate: self.fraction / n,
        }
    }
}

fn diverged(step: u64, e: CedError) -> CedError {
    match e {
        CedError::NonFinite { .. } => CedError::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

pub fn summarize(model: &CedModel, prepared: &[PreparedStream]) -> Result<PassSummary> {
    let mut run = Running::default();
    for p in prepared {
        let pass = model.stream_pass(p, false)?;
        run.push(model, p, pass.loss, &pass.probs);
    }
    Ok(run.summary())
}

/// Mean per-stream gradient over `batch`, reduced in order.
pub fn batch_gradients(model: &CedModel, batch: &[&PreparedStream]) -> Result<(Gradients, f64)> {
    let mut total = Gradients::zeros_like(&model.params);
    let mut loss = 0.0;
    for p in batch {
        let pass = model.stream_pass(p, true)?;
        total.accumulate(pass.grads.as_ref().expect("requested gradients"));
        loss += pass.loss;
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((total, loss / n))
}

/// Batches of similar length: shuffle, sort pools of `4 * batch_size` by
/// interval count, cut, then shuffle batch order.
fn make_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * 4) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

pub fn train(train: &[&RepostStream], validation: &[&RepostStream], config: &TrainConfig) -> Result<TrainOutcome> {
    if validation.is_empty() {
        return Err(CedError::invalid("no validation streams"));
    }
    let mut model = CedModel::init(config, train)?;
    let config = model.config.clone();
    let train_p: Vec<PreparedStream> = train.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let val_p: Vec<PreparedStream> = validation.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let lengths: Vec<usize> = train_p.iter().map(PreparedStream::num_steps).collect();

    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut log = TrainLog::default();
    let mut best: Option<(f64, u64, ParamStore)> = None;
    let mut since_best = 0usize;
    let mut step = 0u64;
    let mut running = Running::default();
    let mut stopped_early = false;

    'epochs: for epoch in 0..config.epochs {
        for batch in make_batches(&lengths, config.batch_size, &mut rng) {
            step += 1;
            let streams: Vec<&PreparedStream> = batch.iter().map(|&i| &train_p[i]).collect();
            let mut grads = Gradients::zeros_like(&model.params);
            let mut batch_loss = 0.0;
            for p in &streams {
                let pass = model.stream_pass(p, true).map_err(|e| diverged(step, e))?;
                if !pass.loss.is_finite() {
                    return Err(CedError::Diverged { step, loss: pass.loss });
                }
                grads.accumulate(pass.grads.as_ref().expect("requested gradients"));
                batch_loss += pass.loss;
                running.push(&model, p, pass.loss, &pass.probs);
            }
            grads.scale(1.0 / streams.len() as f64);
            if !grads.is_finite() {
                return Err(CedError::Diverged {
                    step,
                    loss: batch_loss / streams.len() as f64,
                });
            }
            grads.clip_global_norm(config.clip_norm);
            adam.step(&mut model.params, &grads).map_err(|e| diverged(step, e))?;

            if step.is_multiple_of(config.log_every as u64) {
                if evaluate_and_log(&model, &val_p, step, &mut running, &mut log, &mut best, &mut since_best)? {
                    since_best = 0;
                } else if since_best >= config.patience {
                    log::info!("early stop at step {step} (epoch {epoch})");
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    if !step.is_multiple_of(config.log_every as u64) || step == 0 {
        evaluate_and_log(&model, &val_p, step, &mut running, &mut log, &mut best, &mut since_best)?;
    }

    let (best_accuracy, best_step, params) = best.expect("at least one evaluation");
    model.params = params;
    Ok(TrainOutcome {
        model,
        best_step,
        best_accuracy,
        steps: step,
        stopped_early,
        log,
    })
}

/// Logs a train row (streams since the last log) and a validation row;
/// returns whether validation accuracy improved on the best so far.
fn evaluate_and_log(
    model: &CedModel,
    val: &[PreparedStream],
    step: u64,
    running: &mut Running,
    log: &mut TrainLog,
    best: &mut Option<(f64, u64, ParamStore)>,
    since_best: &mut usize,
) -> Result<bool> {
    if running.n > 0 {
        let t = running.summary();
        log.rows.push(LogRow {
            step,
            split: Split::Train,
            accuracy: t.accuracy,
            early_rate: t.early_rate,
            loss: t.loss,
        });
    }
    *running = Running::default();
    let v = summarize(model, val).map_err(|e| diverged(step, e))?;
    log.rows.push(LogRow {
        step,
        split: Split::Validation,
        accuracy: v.accuracy,
        early_rate: v.early_rate,
        loss: v.loss,
    });
    log::info!(
        "step {step}: val acc {:.4} er {:.4} loss {:.4}",
        v.accuracy,
        v.early_rate,
        v.loss
    );
    let improved = best.as_ref().is_none_or(|(acc, _, _)| v.accuracy > *acc);
    if improved {
        *best = Some((v.accuracy, step, model.params.clone()));
    } else {
        *since_best += 1;
    }
    Ok(improved)
}

/// Online detection over `streams` plus the metrics bundle.
pub fn evaluate(
    model: &CedModel,
    streams: &[&RepostStream],
    alpha: f64,
) -> Result<(Vec<DetectionOutcome>, MetricsBundle)> {
    evaluate_truncated(model, streams, alpha, None)
}

pub fn evaluate_truncated(
    model: &CedModel,
    streams: &[&RepostStream],
    alpha: f64,
    max_fraction: Option<f64>,
) -> Result<(Vec<DetectionOutcome>, MetricsBundle)> {
    let outcomes = detect_all(streams, model, alpha, max_fraction)?;
    let labels: Vec<u8> = streams.iter().map(|s| s.label).collect();
    let metrics = compute_metrics(&outcomes, &labels)?;
    Ok((outcomes, metrics))
}
