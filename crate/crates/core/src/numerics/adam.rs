use super::tensor::{Gradients, ParamStore, Tensor};
use crate::error::{CedError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, idx: usize) -> &Tensor {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &Tensor {
        &self.v[idx]
    }

    /// Applies one update. Parameters without a gradient see `g = 0`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CedError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = grads.get(id);
            if let Some(g) = grad {
                if g.shape() != params.get(id).shape() {
                    return Err(CedError::ShapeMismatch {
                        op: "adam_step",
                        lhs: params.get(id).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = params.get_mut(id).data_mut();
            for k in 0..theta.len() {
                let gk = grad.map_or(0.0, |g| g.data()[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !params.get(id).is_finite() {
                return Err(CedError::NonFinite {
                    op: format!("adam update of {}", params.name(id)),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamStore, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_hand_values() {
        let (mut s, id) = one_param(0.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let mut g = Gradients::zeros_like(&s);
        g.slot(id, &[1])[0] = 1.0;
        adam.step(&mut s, &g).unwrap();
        assert!((adam.first_moment(0).data()[0] - 0.1).abs() < 1e-15);
        assert!((adam.second_moment(0).data()[0] - 0.001).abs() < 1e-15);
        let delta = s.get(id).data()[0];
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((delta - expected).abs() < 1e-18, "{delta} vs {expected}");
        assert!((delta + 9.99999990e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut s, id) = one_param(0.7);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let g = Gradients::zeros_like(&s);
        adam.step(&mut s, &g).unwrap();
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s.get(id).data()[0], 0.7);
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn parameters_do_not_interact() {
        let mut both = ParamStore::new();
        let a = both.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = both.add("b", Tensor::scalar(-1.0)).unwrap();
        let mut only_a = ParamStore::new();
        let a2 = only_a.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();

        let mut g_both = Gradients::zeros_like(&both);
        g_both.slot(a, &[2]).copy_from_slice(&[0.3, -0.2]);
        g_both.slot(b, &[1])[0] = 5.0;
        let mut g_a = Gradients::zeros_like(&only_a);
        g_a.slot(a2, &[2]).copy_from_slice(&[0.3, -0.2]);

        let mut s1 = AdamState::new(&both, AdamConfig::default());
        let mut s2 = AdamState::new(&only_a, AdamConfig::default());
        for _ in 0..3 {
            s1.step(&mut both, &g_both).unwrap();
            s2.step(&mut only_a, &g_a).unwrap();
        }
        assert_eq!(both.get(a).data(), only_a.get(a2).data());
    }

    #[test]
    fn deterministic() {
        let run = || {
            let (mut s, id) = one_param(0.5);
            let mut adam = AdamState::new(&s, AdamConfig::default());
            for k in 0..10 {
                let mut g = Gradients::zeros_like(&s);
                g.slot(id, &[1])[0] = (k as f64).sin();
                adam.step(&mut s, &g).unwrap();
            }
            s.get(id).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
