//! Gated recurrent units stacked over the interval features.
//!
//! ```text
//! r_i = sigmoid(U_R x_i + W_R h_{i-1} + b_r)
//! z_i = sigmoid(U_Z x_i + W_Z h_{i-1} + b_z)
//! c_i = tanh(U_H x_i + W_H (h_{i-1} * r_i) + b_h)
//! h_i = (1 - z_i) * h_{i-1} + z_i * c_i
//! ```
//!
//! The biases are optional. With `h_0 = 0` every state stays inside
//! `(-1, 1)` since each step is a convex combination of the previous state
//! and a `tanh` output.

use rand::Rng;

use crate::error::{CedError, Result};
use crate::numerics::{uniform_tensor, Graph, ParamId, ParamStore, Tensor, Var};
use crate::textfeat::FeatureTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub ur: ParamId,
    pub wr: ParamId,
    pub uz: ParamId,
    pub wz: ParamId,
    pub uh: ParamId,
    pub wh: ParamId,
    pub biases: Option<[ParamId; 3]>,
}

impl GruLayer {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(CedError::Config("GRU dimensions must be positive".into()));
        }
        let ub = 1.0 / (input_dim as f64).sqrt();
        let wb = 1.0 / (hidden_dim as f64).sqrt();
        let mut add = |name: &str, shape: &[usize], bound: f64| {
            store.add(format!("{prefix}.{name}"), uniform_tensor(rng, shape, bound))
        };
        let ur = add("UR", &[hidden_dim, input_dim], ub)?;
        let wr = add("WR", &[hidden_dim, hidden_dim], wb)?;
        let uz = add("UZ", &[hidden_dim, input_dim], ub)?;
        let wz = add("WZ", &[hidden_dim, hidden_dim], wb)?;
        let uh = add("UH", &[hidden_dim, input_dim], ub)?;
        let wh = add("WH", &[hidden_dim, hidden_dim], wb)?;
        let biases = if with_bias {
            let mut b = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[hidden_dim]));
            Some([b("br")?, b("bz")?, b("bh")?])
        } else {
            None
        };
        Ok(Self {
            input_dim,
            hidden_dim,
            ur,
            wr,
            uz,
            wz,
            uh,
            wh,
            biases,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, with_bias: bool) -> Result<Self> {
        let get = |name: &str| store.require(&format!("{prefix}.{name}"));
        let ur = get("UR")?;
        let shape = store.get(ur).shape();
        let (hidden_dim, input_dim) = (shape[0], shape[1]);
        let biases = if with_bias {
            Some([get("br")?, get("bz")?, get("bh")?])
        } else {
            None
        };
        Ok(Self {
            input_dim,
            hidden_dim,
            ur,
            wr: get("WR")?,
            uz: get("UZ")?,
            wz: get("WZ")?,
            uh: get("UH")?,
            wh: get("WH")?,
            biases,
        })
    }

    fn gate_input(
        &self,
        g: &mut Graph<'_>,
        u: ParamId,
        w: ParamId,
        x: Var,
        h: Var,
        bias: Option<ParamId>,
    ) -> Result<Var> {
        let u = g.param(u);
        let w = g.param(w);
        let ux = g.matmul(u, x)?;
        let wh = g.matmul(w, h)?;
        let s = g.add(ux, wh)?;
        match bias {
            Some(b) => {
                let b = g.param(b);
                g.add(s, b)
            }
            None => Ok(s),
        }
    }

    /// One recurrence step.
    pub fn cell(&self, g: &mut Graph<'_>, x: Var, h_prev: Var) -> Result<Var> {
        if g.shape(x) != [self.input_dim] || g.shape(h_prev) != [self.hidden_dim] {
            return Err(CedError::ShapeMismatch {
                op: "gru_cell",
                lhs: vec![self.input_dim, self.hidden_dim],
                rhs: [g.shape(x), g.shape(h_prev)].concat(),
            });
        }
        let [br, bz, bh] = match self.biases {
            Some(b) => b.map(Some),
            None => [None; 3],
        };
        let r_in = self.gate_input(g, self.ur, self.wr, x, h_prev, br)?;
        let r = g.sigmoid(r_in)?;
        let z_in = self.gate_input(g, self.uz, self.wz, x, h_prev, bz)?;
        let z = g.sigmoid(z_in)?;
        let reset = g.mul(h_prev, r)?;
        let c_in = self.gate_input(g, self.uh, self.wh, x, reset, bh)?;
        let cand = g.tanh(c_in)?;
        let keep = g.one_minus(z)?;
        let carried = g.mul(keep, h_prev)?;
        let fresh = g.mul(z, cand)?;
        g.add(carried, fresh)
    }
}

/// Stacked GRU; layer `k + 1` consumes the states of layer `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedGru {
    pub layers: Vec<GruLayer>,
}

pub fn layer_prefix(k: usize) -> String {
    format!("gru.l{}", k + 1)
}

impl StackedGru {
    pub fn init(
        store: &mut ParamStore,
        input_dim: usize,
        hidden_dims: &[usize],
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if hidden_dims.is_empty() {
            return Err(CedError::Config("GRU needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(hidden_dims.len());
        let mut inp = input_dim;
        for (k, &h) in hidden_dims.iter().enumerate() {
            layers.push(GruLayer::init(store, &layer_prefix(k), inp, h, with_bias, rng)?);
            inp = h;
        }
        Ok(Self { layers })
    }

    pub fn bind(store: &ParamStore, num_layers: usize, with_bias: bool) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|k| GruLayer::bind(store, &layer_prefix(k), with_bias))
            .collect::<Result<Vec<_>>>()?;
        for pair in layers.windows(2) {
            if pair[1].input_dim != pair[0].hidden_dim {
                return Err(CedError::Checkpoint("GRU layer dimensions do not chain".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").hidden_dim
    }

    pub fn zero_state(&self, g: &mut Graph<'_>) -> Result<Vec<Var>> {
        self.layers
            .iter()
            .map(|l| g.constant(Tensor::zeros(&[l.hidden_dim])))
            .collect()
    }

    /// Advances every layer by one step and returns the top-layer state.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, state: &mut [Var]) -> Result<Var> {
        let mut inp = x;
        for (layer, h) in self.layers.iter().zip(state.iter_mut()) {
            *h = layer.cell(g, inp, *h)?;
            inp = *h;
        }
        Ok(inp)
    }

    /// Top-layer states for every step, each optionally extended by the
    /// original-message feature `om`.
    pub fn encode(&self, g: &mut Graph<'_>, xs: &[Var], om: Option<Var>) -> Result<Vec<Var>> {
        let mut state = self.zero_state(g)?;
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let h = self.step(g, x, &mut state)?;
            out.push(match om {
                Some(r) => g.concat(&[h, r])?,
                None => h,
            });
        }
        Ok(out)
    }
}

/// Per-step (possibly augmented) hidden states of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub stream_id: String,
    pub states: Vec<Vec<f64>>,
}

/// Value-level encoding of a feature trace.
pub fn encode(trace: &FeatureTrace, params: &ParamStore, gru: &StackedGru, om: Option<&[f64]>) -> Result<HiddenTrace> {
    let mut g = Graph::new(params);
    let xs = trace
        .columns
        .iter()
        .map(|c| g.constant(Tensor::vector(c.clone())))
        .collect::<Result<Vec<_>>>()?;
    let om = om.map(|r| g.constant(Tensor::vector(r.to_vec()))).transpose()?;
    let states = gru.encode(&mut g, &xs, om)?;
    Ok(HiddenTrace {
        stream_id: trace.stream_id.clone(),
        states: states.iter().map(|&h| g.value(h).data().to_vec()).collect(),
    })
}
