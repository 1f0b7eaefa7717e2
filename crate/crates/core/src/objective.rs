//! Per-step rumor probabilities, the credible detection point and the
//! training objective built around it.
//!
//! For a curve `p_1..p_F`, the credible point `n_f` is the first step whose
//! probability crosses `alpha` on either side (`p >= alpha` or
//! `1 - p >= alpha`); `beta = n_f / F`, or `1` if no step crosses. With
//! `O(i) = ln p(y | h_i)` averaged over the window `n_f..=F`:
//!
//! ```text
//! pred = mean O(i)
//! diff = -mean [ y * max(0, ln alpha - O(i)) + (1 - y) * max(0, ln p_i - ln(1 - alpha)) ]
//! time = -ln beta
//! objective = pred + lambda0 * diff + lambda1 * time
//! ```
//!
//! The search for `n_f` is discrete and receives no gradient, so `time` is a
//! constant with respect to the parameters for a given forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{CedError, Result};
use crate::numerics::{sigmoid, Graph, Tensor, Var};

pub const DEFAULT_LAMBDA0: f64 = 0.01;
pub const DEFAULT_LAMBDA1: f64 = 0.2;

/// Which terms the objective includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveVariant {
    /// pred + lambda0 diff + lambda1 time
    Ced,
    /// pred + lambda0 diff
    O1NoTime,
    /// pred + lambda1 time
    O2NoDiff,
    /// log-likelihood of the final step only
    FullSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub variant: ObjectiveVariant,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 0.875,
            lambda0: DEFAULT_LAMBDA0,
            lambda1: DEFAULT_LAMBDA1,
            variant: ObjectiveVariant::Ced,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.lambda0 >= 0.0 && self.lambda1 >= 0.0 && self.lambda0.is_finite() && self.lambda1.is_finite()) {
            return Err(CedError::Config("lambda weights must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.5..1.0).contains(&alpha) {
        return Err(CedError::Config(format!("alpha must be in [0.5, 1), got {alpha}")));
    }
    Ok(())
}

/// True when `p` is confident enough on either side.
pub fn reaches_threshold(p: f64, alpha: f64) -> bool {
    p >= alpha || 1.0 - p >= alpha
}

/// Rumor probabilities `p(1 | h_i)`, one per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbCurve {
    pub probs: Vec<f64>,
}

impl ProbCurve {
    pub fn new(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Probability at 1-based step `i`.
    pub fn at(&self, i: usize) -> f64 {
        self.probs[i - 1]
    }
}

/// `p_i = sigmoid(h_i . s)` over a trace of hidden states.
pub fn prob_curve(states: &[Vec<f64>], s: &[f64]) -> Result<ProbCurve> {
    let probs = states
        .iter()
        .map(|h| {
            if h.len() != s.len() {
                return Err(CedError::ShapeMismatch {
                    op: "prob_curve",
                    lhs: vec![h.len()],
                    rhs: vec![s.len()],
                });
            }
            Ok(sigmoid(h.iter().zip(s).map(|(a, b)| a * b).sum()))
        })
        .collect::<Result<_>>()?;
    Ok(ProbCurve { probs })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrediblePoint {
    /// 1-based step where the threshold was first reached.
    pub n_f: Option<usize>,
    pub beta: f64,
    pub total: usize,
}

impl CrediblePoint {
    /// First step of the averaging window: `n_f`, or the last step when the
    /// threshold was never reached.
    pub fn window_start(&self) -> usize {
        self.n_f.unwrap_or(self.total)
    }
}

pub fn find_credible_point(curve: &ProbCurve, alpha: f64) -> CrediblePoint {
    let total = curve.len();
    let n_f = curve
        .probs
        .iter()
        .position(|&p| reaches_threshold(p, alpha))
        .map(|i| i + 1);
    let beta = n_f.map_or(1.0, |n| n as f64 / total as f64);
    CrediblePoint { n_f, beta, total }
}

fn window(point: &CrediblePoint, variant: ObjectiveVariant) -> std::ops::RangeInclusive<usize> {
    match variant {
        ObjectiveVariant::FullSequence => point.total..=point.total,
        _ => point.window_start()..=point.total,
    }
}

fn log_lik(p: f64, y: u8) -> f64 {
    if y == 1 {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

/// Mean log-likelihood of the label from the credible point onwards.
pub fn o_pred(curve: &ProbCurve, y: u8, point: &CrediblePoint) -> f64 {
    o_pred_variant(curve, y, point, ObjectiveVariant::Ced)
}

pub fn o_pred_variant(curve: &ProbCurve, y: u8, point: &CrediblePoint, variant: ObjectiveVariant) -> f64 {
    let w = window(point, variant);
    let k = w.clone().count() as f64;
    w.map(|i| log_lik(curve.at(i), y)).sum::<f64>() / k
}

pub fn o_time(point: &CrediblePoint) -> f64 {
    -point.beta.ln()
}

/// Negated mean hinge violation of the threshold after the credible point.
pub fn o_diff(curve: &ProbCurve, y: u8, point: &CrediblePoint, alpha: f64) -> f64 {
    let w = point.window_start()..=point.total;
    let k = w.clone().count() as f64;
    let total: f64 = w
        .map(|i| {
            let p = curve.at(i);
            if y == 1 {
                (alpha.ln() - p.ln()).max(0.0)
            } else {
                (p.ln() - (1.0 - alpha).ln()).max(0.0)
            }
        })
        .sum();
    -total / k
}

/// Loss to minimise (the negated objective) for one stream.
pub fn o_ced(curve: &ProbCurve, y: u8, cfg: &ObjectiveConfig) -> f64 {
    let point = find_credible_point(curve, cfg.alpha);
    let pred = o_pred_variant(curve, y, &point, cfg.variant);
    let objective = match cfg.variant {
        ObjectiveVariant::Ced => {
            pred + cfg.lambda0 * o_diff(curve, y, &point, cfg.alpha) + cfg.lambda1 * o_time(&point)
        }
        ObjectiveVariant::O1NoTime => pred + cfg.lambda0 * o_diff(curve, y, &point, cfg.alpha),
        ObjectiveVariant::O2NoDiff => pred + cfg.lambda1 * o_time(&point),
        ObjectiveVariant::FullSequence => pred,
    };
    -objective
}

/// Graph version of [`o_ced`] over per-step logits `h_i . s`. Returns the
/// loss variable and the credible point found on this pass.
pub fn ced_loss(g: &mut Graph<'_>, logits: &[Var], y: u8, cfg: &ObjectiveConfig) -> Result<(Var, CrediblePoint)> {
    if logits.is_empty() {
        return Err(CedError::invalid("empty logit sequence"));
    }
    if y > 1 {
        return Err(CedError::invalid(format!("label must be 0 or 1, got {y}")));
    }
    let curve = ProbCurve::new(logits.iter().map(|&l| sigmoid(g.scalar(l))).collect());
    let point = find_credible_point(&curve, cfg.alpha);
    g.record_discrete(point.n_f.map_or(0, |n| n as u64));

    let steps: Vec<Var> = window(&point, cfg.variant).map(|i| logits[i - 1]).collect();
    let mut log_lik = Vec::with_capacity(steps.len());
    for &l in &steps {
        let signed = if y == 1 { l } else { g.scale(l, -1.0)? };
        log_lik.push(g.log_sigmoid(signed)?);
    }
    let ll = g.concat(&log_lik)?;
    let pred = g.mean(ll)?;

    let use_diff = matches!(cfg.variant, ObjectiveVariant::Ced | ObjectiveVariant::O1NoTime);
    let use_time = matches!(cfg.variant, ObjectiveVariant::Ced | ObjectiveVariant::O2NoDiff);

    let mut objective = pred;
    if use_diff {
        let margin = if y == 1 {
            // ln alpha - O(i)
            let neg = g.scale(ll, -1.0)?;
            g.add_scalar(neg, cfg.alpha.ln())?
        } else {
            // ln p(1|h_i) - ln(1 - alpha)
            let mut lp = Vec::with_capacity(steps.len());
            for &l in &steps {
                lp.push(g.log_sigmoid(l)?);
            }
            let lp = g.concat(&lp)?;
            g.add_scalar(lp, -(1.0 - cfg.alpha).ln())?
        };
        let violation = g.hinge(margin)?;
        let mean_violation = g.mean(violation)?;
        let diff = g.scale(mean_violation, -cfg.lambda0)?;
        objective = g.add(objective, diff)?;
    }
    if use_time {
        let time = g.constant(Tensor::scalar(cfg.lambda1 * o_time(&point)))?;
        objective = g.add(objective, time)?;
    }
    let loss = g.scale(objective, -1.0)?;
    Ok((loss, point))
}
