//! Streaming threshold detection and evaluation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::RepostStream;
use crate::error::{CedError, Result};
use crate::objective::{check_alpha, reaches_threshold};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Rumor,
    NonRumor,
}

impl Verdict {
    pub fn label(self) -> u8 {
        match self {
            Verdict::Rumor => 1,
            Verdict::NonRumor => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub stream_id: String,
    pub verdict: Verdict,
    pub decided_early: bool,
    /// 1-based interval at which the verdict was issued.
    pub detection_step: usize,
    pub total_steps: usize,
    /// Probabilities for the prefix actually consumed.
    pub prob_curve: Vec<f64>,
}

impl DetectionOutcome {
    pub fn fraction(&self) -> f64 {
        self.detection_step as f64 / self.total_steps as f64
    }
}

/// Anything that can emit per-interval rumor probabilities in order.
pub trait StreamScorer {
    /// Intervals the scorer would consume for the whole stream.
    fn num_steps(&self, stream: &RepostStream) -> usize;

    /// Only the last visible step may issue a verdict.
    fn full_sequence(&self) -> bool;

    /// Calls `visit(step, p)` for steps `1..=visible` in order until it
    /// returns false.
    fn scan(&self, stream: &RepostStream, visible: usize, visit: &mut dyn FnMut(usize, f64) -> bool) -> Result<()>;
}

/// Intervals visible under the truncation protocol: `ceil(f * total)`,
/// at least one.
pub fn visible_steps(total: usize, max_fraction: Option<f64>) -> usize {
    match max_fraction {
        None => total,
        Some(f) => (((f * total as f64) - 1e-9).ceil() as usize).clamp(1, total),
    }
}

/// Threshold rule applied to an already computed curve. `total` is the
/// untruncated length.
pub fn outcome_from_curve(
    stream_id: &str,
    curve: &[f64],
    total: usize,
    alpha: f64,
    full_sequence: bool,
) -> DetectionOutcome {
    let hit = if full_sequence {
        None
    } else {
        curve.iter().position(|&p| reaches_threshold(p, alpha))
    };
    let (step, verdict, early) = match hit {
        Some(i) => {
            let v = if curve[i] >= alpha {
                Verdict::Rumor
            } else {
                Verdict::NonRumor
            };
            (i + 1, v, true)
        }
        None => {
            let p = *curve.last().expect("non-empty curve");
            let v = if p >= 0.5 { Verdict::Rumor } else { Verdict::NonRumor };
            (curve.len(), v, false)
        }
    };
    DetectionOutcome {
        stream_id: stream_id.to_string(),
        verdict,
        decided_early: early,
        detection_step: step,
        total_steps: total,
        prob_curve: curve[..step].to_vec(),
    }
}

/// Consumes intervals in order and stops at the first decidable step.
pub fn detect_stream(
    stream: &RepostStream,
    model: &dyn StreamScorer,
    alpha: f64,
    max_fraction: Option<f64>,
) -> Result<DetectionOutcome> {
    check_alpha(alpha)?;
    if let Some(f) = max_fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(CedError::invalid(format!("max_fraction must be in (0, 1], got {f}")));
        }
    }
    let total = model.num_steps(stream);
    if total == 0 {
        return Err(CedError::invalid(format!("stream {} is empty", stream.id)));
    }
    let visible = visible_steps(total, max_fraction);
    let full = model.full_sequence();
    let mut curve = Vec::with_capacity(visible);
    model.scan(stream, visible, &mut |_, p| {
        curve.push(p);
        full || !reaches_threshold(p, alpha)
    })?;
    if curve.is_empty() {
        return Err(CedError::invalid(format!(
            "no probabilities produced for stream {}",
            stream.id
        )));
    }
    Ok(outcome_from_curve(&stream.id, &curve, total, alpha, full))
}

pub fn detect_all(
    streams: &[&RepostStream],
    model: &dyn StreamScorer,
    alpha: f64,
    max_fraction: Option<f64>,
) -> Result<Vec<DetectionOutcome>> {
    streams
        .iter()
        .map(|s| detect_stream(s, model, alpha, max_fraction))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub count: usize,
    pub accuracy: f64,
    /// Rumor class as positive.
    pub rumor: ClassScores,
    pub macro_avg: ClassScores,
    pub early_rate: f64,
    /// Counts of `t/|F|` in (0,0.1], (0.1,0.2], ..., (0.9,1.0].
    pub er_histogram: [usize; 10],
}

fn scores(tp: usize, fp: usize, fneg: usize) -> ClassScores {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassScores { precision, recall, f1 }
}

/// Decile bucket of `t / total` using integer arithmetic.
pub fn decile_bucket(t: usize, total: usize) -> usize {
    (10 * t).div_ceil(total).clamp(1, 10) - 1
}

pub fn compute_metrics(outcomes: &[DetectionOutcome], labels: &[u8]) -> Result<MetricsBundle> {
    if outcomes.len() != labels.len() {
        return Err(CedError::invalid(format!(
            "{} outcomes but {} labels",
            outcomes.len(),
            labels.len()
        )));
    }
    if outcomes.is_empty() {
        return Err(CedError::invalid("no outcomes to score"));
    }
    let mut confusion = [[0usize; 2]; 2];
    let mut hist = [0usize; 10];
    let mut er = 0.0;
    for (o, &y) in outcomes.iter().zip(labels) {
        if y > 1 {
            return Err(CedError::invalid(format!("label must be 0 or 1, got {y}")));
        }
        if o.detection_step == 0 || o.detection_step > o.total_steps {
            return Err(CedError::invalid(format!(
                "stream {} has detection step out of range",
                o.stream_id
            )));
        }
        confusion[y as usize][o.verdict.label() as usize] += 1;
        er += o.fraction();
        hist[decile_bucket(o.detection_step, o.total_steps)] += 1;
    }
    let n = outcomes.len();
    let rumor = scores(confusion[1][1], confusion[0][1], confusion[1][0]);
    let non = scores(confusion[0][0], confusion[1][0], confusion[0][1]);
    let macro_avg = ClassScores {
        precision: (rumor.precision + non.precision) / 2.0,
        recall: (rumor.recall + non.recall) / 2.0,
        f1: (rumor.f1 + non.f1) / 2.0,
    };
    Ok(MetricsBundle {
        count: n,
        accuracy: (confusion[0][0] + confusion[1][1]) as f64 / n as f64,
        rumor,
        macro_avg,
        early_rate: er / n as f64,
        er_histogram: hist,
    })
}

pub const TABLE_HEADER: [&str; 6] = ["Method", "Acc", "Precision", "Recall", "F1", "ER"];

/// Aligned text table, one row per `(name, metrics)`.
pub fn metrics_table(rows: &[(String, &MetricsBundle)]) -> String {
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain([TABLE_HEADER[0].len()])
        .max()
        .unwrap_or(6);
    let mut out = format!("{:<name_w$}", TABLE_HEADER[0]);
    for h in &TABLE_HEADER[1..] {
        let _ = write!(out, " {h:>9}");
    }
    out.push('\n');
    for (name, m) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for v in [m.accuracy, m.rumor.precision, m.rumor.recall, m.rumor.f1, m.early_rate] {
            let _ = write!(out, " {v:>9.4}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>, bool);

    impl StreamScorer for Fixed {
        fn num_steps(&self, _: &RepostStream) -> usize {
            self.0.len()
        }
        fn full_sequence(&self) -> bool {
            self.1
        }
        fn scan(&self, _: &RepostStream, visible: usize, visit: &mut dyn FnMut(usize, f64) -> bool) -> Result<()> {
            for (i, &p) in self.0[..visible].iter().enumerate() {
                if !visit(i + 1, p) {
                    break;
                }
            }
            Ok(())
        }
    }

    fn stream() -> RepostStream {
        use crate::corpus::Repost;
        RepostStream::new(
            "s",
            1,
            "o",
            vec![Repost {
                timestamp: 0,
                text: "x".into(),
            }],
        )
        .unwrap()
    }

    fn outcome(t: usize, total: usize, v: Verdict) -> DetectionOutcome {
        DetectionOutcome {
            stream_id: "x".into(),
            verdict: v,
            decided_early: t < total,
            detection_step: t,
            total_steps: total,
            prob_curve: vec![],
        }
    }

    #[test]
    fn stops_at_first_decidable_step() {
        let m = Fixed(vec![0.6, 0.9, 0.1], false);
        let o = detect_stream(&stream(), &m, 0.875, None).unwrap();
        assert_eq!(
            (o.detection_step, o.verdict, o.decided_early),
            (2, Verdict::Rumor, true)
        );
        assert_eq!(o.prob_curve, vec![0.6, 0.9]);
    }

    #[test]
    fn forced_fallback() {
        let m = Fixed(vec![0.6, 0.7], false);
        let o = detect_stream(&stream(), &m, 0.875, None).unwrap();
        assert_eq!(
            (o.detection_step, o.verdict, o.decided_early),
            (2, Verdict::Rumor, false)
        );
        let m = Fixed(vec![0.6, 0.3], false);
        assert_eq!(
            detect_stream(&stream(), &m, 0.875, None).unwrap().verdict,
            Verdict::NonRumor
        );
    }

    #[test]
    fn low_side_decides_non_rumor() {
        let m = Fixed(vec![0.5, 0.125], false);
        let o = detect_stream(&stream(), &m, 0.875, None).unwrap();
        assert_eq!(
            (o.detection_step, o.verdict, o.decided_early),
            (2, Verdict::NonRumor, true)
        );
    }

    #[test]
    fn truncation_limits_consumption() {
        let m = Fixed(vec![0.6; 10], false);
        let o = detect_stream(&stream(), &m, 0.875, Some(0.5)).unwrap();
        assert_eq!(o.detection_step, 5);
        assert_eq!(o.total_steps, 10);
        assert_eq!(visible_steps(10, Some(0.05)), 1);
        assert_eq!(visible_steps(10, Some(0.95)), 10);
        assert_eq!(visible_steps(8, Some(0.25)), 2);
        assert!(detect_stream(&stream(), &m, 0.875, Some(0.0)).is_err());
    }

    #[test]
    fn full_sequence_always_uses_last_step() {
        let m = Fixed(vec![0.99, 0.99, 0.2], true);
        let o = detect_stream(&stream(), &m, 0.875, None).unwrap();
        assert_eq!(
            (o.detection_step, o.verdict, o.decided_early),
            (3, Verdict::NonRumor, false)
        );
    }

    #[test]
    fn early_rate_examples() {
        let m = compute_metrics(&[outcome(2, 10, Verdict::Rumor)], &[1]).unwrap();
        assert_eq!(m.early_rate, 0.2);
        let m = compute_metrics(&[outcome(1, 4, Verdict::Rumor), outcome(4, 4, Verdict::Rumor)], &[1, 1]).unwrap();
        assert_eq!(m.early_rate, 0.625);
        assert_eq!(m.accuracy, 1.0);
        assert!(compute_metrics(&[outcome(1, 4, Verdict::Rumor)], &[]).is_err());
    }

    #[test]
    fn decile_edges() {
        assert_eq!(decile_bucket(1, 10), 0);
        assert_eq!(decile_bucket(2, 10), 1);
        assert_eq!(decile_bucket(10, 10), 9);
        assert_eq!(decile_bucket(1, 3), 3);
        assert_eq!(decile_bucket(1, 100), 0);
        assert_eq!(decile_bucket(11, 100), 1);
    }

    #[test]
    fn table_has_header_and_rows() {
        let m = compute_metrics(&[outcome(1, 1, Verdict::Rumor)], &[1]).unwrap();
        let t = metrics_table(&[("CED".into(), &m)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("Method"));
        assert!(lines[1].starts_with("CED"));
    }
}
