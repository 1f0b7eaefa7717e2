//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Gradients, ParamId, ParamStore};
use crate::error::Result;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Which parameter entries to probe.
#[derive(Debug, Clone, Copy)]
pub enum Sampling {
    All,
    Random { count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries where a perturbation of up to 10 epsilon crossed a kink.
    pub skipped: usize,
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(θ+ε) - f(θ-ε)) / 2ε` entry by entry.
///
/// `f` returns the loss and the graph signature (see
/// [`super::Graph::signature`]). An entry is skipped when moving it by `ε`
/// or `10ε` in either direction changes the signature, i.e. when a ReLU,
/// hinge, max-pool or threshold decision flips near the evaluation point.
pub fn grad_check<F>(
    params: &mut ParamStore,
    analytic: &Gradients,
    mut f: F,
    epsilon: f64,
    sampling: Sampling,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, u64)>,
{
    let entries: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k)))
        .collect();
    let picked: Vec<(ParamId, usize)> = match sampling {
        Sampling::All => entries,
        Sampling::Random { count, seed } if count < entries.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, entries.len(), count).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| entries[i]).collect()
        }
        Sampling::Random { .. } => entries,
    };

    let (_, base_sig) = f(params)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (id, k) in picked {
        let orig = params.get(id).data()[k];
        let mut eval = |params: &mut ParamStore, delta: f64| -> Result<(f64, u64)> {
            params.get_mut(id).data_mut()[k] = orig + delta;
            let r = f(params);
            params.get_mut(id).data_mut()[k] = orig;
            r
        };
        let (plus, sig_p) = eval(params, epsilon)?;
        let (minus, sig_m) = eval(params, -epsilon)?;
        let (_, sig_pp) = eval(params, 10.0 * epsilon)?;
        let (_, sig_mm) = eval(params, -10.0 * epsilon)?;
        if [sig_p, sig_m, sig_pp, sig_mm].iter().any(|s| *s != base_sig) {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic.entry(id, k), numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((params.name(id).to_string(), k));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn quadratic(s: &ParamStore) -> Result<(f64, u64, Gradients)> {
        let mut g = Graph::new(s);
        let id = s.id("theta").unwrap();
        let x = g.param(id);
        let d = g.dot(x, x)?;
        let half = g.scale(d, 0.5)?;
        let grads = g.backward(half)?;
        Ok((g.scalar(half), g.signature(), grads))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::vector(vec![0.3, -1.2, 2.5, 0.0])).unwrap();
        let (_, _, grads) = quadratic(&s).unwrap();
        let report = grad_check(
            &mut s,
            &grads,
            |p| quadratic(p).map(|(l, sig, _)| (l, sig)),
            DEFAULT_EPSILON,
            Sampling::All,
        )
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    fn hinge_loss(s: &ParamStore) -> Result<(f64, u64, Gradients)> {
        let mut g = Graph::new(s);
        let x = g.param(s.id("x").unwrap());
        let h = g.hinge(x)?;
        let l = g.sum(h)?;
        let grads = g.backward(l)?;
        Ok((g.scalar(l), g.signature(), grads))
    }

    #[test]
    fn kinks_are_skipped() {
        // entry 0 sits on the kink, entry 1 within 10 eps of it, entry 2 is smooth
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![0.0, 5e-5, 0.5])).unwrap();
        let (_, _, grads) = hinge_loss(&s).unwrap();
        let report = grad_check(
            &mut s,
            &grads,
            |p| hinge_loss(p).map(|(l, sig, _)| (l, sig)),
            DEFAULT_EPSILON,
            Sampling::All,
        )
        .unwrap();
        assert_eq!(report.skipped, 2);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5 / 1.5).abs() < 1e-15);
    }
}
