//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! are borrowed from a [`ParamStore`] rather than copied, so building a graph
//! per stream is cheap even for large embedding tables. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every parameter that contributed.
//!
//! Every op validates shapes and rejects non-finite results.

use super::tensor::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{CedError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Hinge(Var),
    Log(Var),
    LogSigmoid(Var),
    Concat(Vec<Var>),
    MaxRows(Var, Vec<usize>),
    Mean(Var),
    Sum(Var),
    Dot(Var, Var),
    Gather(Var, Vec<usize>),
    Unfold(Var, usize),
    Index(Var, usize),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    signature: u64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without underflow for large negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            signature: FNV_OFFSET,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Hash of every discrete choice made so far: active ReLU/hinge units,
    /// max-pool winners and anything passed to [`Graph::record_discrete`].
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn record_discrete(&mut self, v: u64) {
        self.mix(v);
    }

    fn mix(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.signature = (self.signature ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(CedError::NonFinite { op: name.to_string() });
        }
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) | Op::Dot(a, b) => {
                ng(a) || ng(b)
            }
            Op::Concat(vs) => vs.iter().any(ng),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Hinge(a)
            | Op::Log(a)
            | Op::LogSigmoid(a)
            | Op::MaxRows(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Gather(a, _)
            | Op::Unfold(a, _)
            | Op::Index(a, _) => ng(a),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant, "constant")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CedError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || CedError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aval) in arow.iter().enumerate() {
                if aval == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aval * bv;
                }
            }
        }
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), "matmul")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds vector `bias` of length `c` to every row of `[r, c]` (or to a
    /// vector of length `c`).
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let cols = *sx.last().expect("non-empty shape");
        if sb.len() != 1 || sb[0] != cols || sx.len() > 2 {
            return Err(CedError::ShapeMismatch {
                op: "add_row_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let bd = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(&bd) {
                *v += b;
            }
        }
        self.push(Tensor::new(sx, data)?, Op::AddRowBias(x, bias), "add_row_bias")
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, op, name)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, factor), "scale", |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), "add_scalar", |x| x + c)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    fn record_mask(&mut self, a: Var) {
        let mask: Vec<u64> = self
            .value(a)
            .data()
            .chunks(64)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .fold(0u64, |m, (i, x)| m | (u64::from(*x > 0.0) << i))
            })
            .collect();
        for m in mask {
            self.mix(m);
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record_mask(a);
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    /// `max(0, x)`; subgradient 0 at the kink.
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        self.record_mask(a);
        self.map(a, Op::Hinge(a), "hinge", |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::LogSigmoid(a), "log_sigmoid", log_sigmoid)
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CedError::invalid("concat of nothing"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 1 {
                return Err(CedError::ShapeMismatch {
                    op: "concat",
                    lhs: s.to_vec(),
                    rhs: vec![],
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), "concat")
    }

    /// Column-wise maximum of `[r, c]`, giving `[c]`. Ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(CedError::ShapeMismatch {
                op: "max_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut best = d[..c].to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for j in 0..c {
                if d[i * c + j] > best[j] {
                    best[j] = d[i * c + j];
                    arg[j] = i;
                }
            }
        }
        for &k in &arg {
            self.mix(k as u64);
        }
        self.push(Tensor::vector(best), Op::MaxRows(a, arg), "max_rows")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Inner product of two vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        if self.shape(a).len() != 1 {
            return Err(CedError::ShapeMismatch {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b), "dot")
    }

    /// Row lookup into a `[V, d]` table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || rows.is_empty() {
            return Err(CedError::ShapeMismatch {
                op: "gather",
                lhs: s,
                rhs: vec![rows.len()],
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(bad) = rows.iter().find(|&&r| r >= v) {
            return Err(CedError::invalid(format!("gather row {bad} out of range {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        self.push(
            Tensor::matrix(rows.len(), d, data)?,
            Op::Gather(table, rows.to_vec()),
            "gather",
        )
    }

    /// Sliding windows of `width` consecutive rows of `[n, d]`, each
    /// flattened into one row: `[n - width + 1, width * d]`.
    pub fn unfold(&mut self, a: Var, width: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || width == 0 || width > s[0] {
            return Err(CedError::ShapeMismatch {
                op: "unfold",
                lhs: s,
                rhs: vec![width],
            });
        }
        let (n, d) = (s[0], s[1]);
        let rows = n - width + 1;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * width * d);
        for i in 0..rows {
            data.extend_from_slice(&src[i * d..(i + width) * d]);
        }
        self.push(Tensor::matrix(rows, width * d, data)?, Op::Unfold(a, width), "unfold")
    }

    /// Element `k` of the flattened tensor as a scalar.
    pub fn index(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        if k >= t.len() {
            return Err(CedError::invalid(format!("index {k} out of range {}", t.len())));
        }
        let v = t.data()[k];
        self.push(Tensor::scalar(v), Op::Index(a, k), "index")
    }

    /// Reverse pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(CedError::ShapeMismatch {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = self.value(Var(idx)).data();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = out.slot(*id, self.params.get(*id).shape());
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let sa = self.shape(*a);
                    let (m, k) = (sa[0], sa[1]);
                    let n = g.len() / m;
                    let ad = self.value(*a).data();
                    let bd = self.value(*b).data();
                    if self.needs(*a) {
                        let ga = self.grad_slot(&mut grads, *a);
                        // dA = dC * B^T
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let mut acc = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    if self.needs(*b) {
                        let gb = self.grad_slot(&mut grads, *b);
                        // dB = A^T * dC
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g, |gv, _| gv);
                    self.accumulate(&mut grads, *b, &g, |gv, _| gv);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &g, |gv, _| gv);
                    self.accumulate(&mut grads, *b, &g, |gv, _| -gv);
                }
                Op::Mul(a, b) => {
                    let bd = self.value(*b).data();
                    let ad = self.value(*a).data();
                    self.accumulate(&mut grads, *a, &g, |gv, i| gv * bd[i]);
                    self.accumulate(&mut grads, *b, &g, |gv, i| gv * ad[i]);
                }
                Op::AddRowBias(x, bias) => {
                    self.accumulate(&mut grads, *x, &g, |gv, _| gv);
                    if self.needs(*bias) {
                        let gb = self.grad_slot(&mut grads, *bias);
                        let cols = gb.len();
                        for row in g.chunks(cols) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Scale(a, f) => self.accumulate(&mut grads, *a, &g, |gv, _| gv * f),
                Op::AddScalar(a) => self.accumulate(&mut grads, *a, &g, |gv, _| gv),
                Op::Sigmoid(a) => self.accumulate(&mut grads, *a, &g, |gv, i| gv * y[i] * (1.0 - y[i])),
                Op::Tanh(a) => self.accumulate(&mut grads, *a, &g, |gv, i| gv * (1.0 - y[i] * y[i])),
                Op::Relu(a) | Op::Hinge(a) => {
                    let x = self.value(*a).data();
                    self.accumulate(&mut grads, *a, &g, |gv, i| if x[i] > 0.0 { gv } else { 0.0 });
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    self.accumulate(&mut grads, *a, &g, |gv, i| gv / x[i]);
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a).data();
                    self.accumulate(&mut grads, *a, &g, |gv, i| gv * sigmoid(-x[i]));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let seg = &g[offset..offset + len];
                        self.accumulate(&mut grads, p, seg, |gv, _| gv);
                        offset += len;
                    }
                }
                Op::MaxRows(a, arg) => {
                    if self.needs(*a) {
                        let c = arg.len();
                        let ga = self.grad_slot(&mut grads, *a);
                        for (j, &row) in arg.iter().enumerate() {
                            ga[row * c + j] += g[j];
                        }
                    }
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let gv = g[0] / n;
                    self.accumulate_const(&mut grads, *a, gv);
                }
                Op::Sum(a) => self.accumulate_const(&mut grads, *a, g[0]),
                Op::Dot(a, b) => {
                    let bd = self.value(*b).data();
                    let ad = self.value(*a).data();
                    let s = g[0];
                    if self.needs(*a) {
                        let ga = self.grad_slot(&mut grads, *a);
                        for (o, v) in ga.iter_mut().zip(bd) {
                            *o += s * v;
                        }
                    }
                    if self.needs(*b) {
                        let gb = self.grad_slot(&mut grads, *b);
                        for (o, v) in gb.iter_mut().zip(ad) {
                            *o += s * v;
                        }
                    }
                }
                Op::Gather(table, rows) => {
                    if self.needs(*table) {
                        let d = self.shape(*table)[1];
                        let gt = self.grad_slot(&mut grads, *table);
                        for (k, &r) in rows.iter().enumerate() {
                            for (o, v) in gt[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Unfold(a, width) => {
                    if self.needs(*a) {
                        let d = self.shape(*a)[1];
                        let span = width * d;
                        let ga = self.grad_slot(&mut grads, *a);
                        for (i, row) in g.chunks(span).enumerate() {
                            for (o, v) in ga[i * d..i * d + span].iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Index(a, k) => {
                    if self.needs(*a) {
                        let ga = self.grad_slot(&mut grads, *a);
                        ga[*k] += g[0];
                    }
                }
            }
        }
        if !out.is_finite() {
            return Err(CedError::NonFinite { op: "backward".into() });
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(f64, usize) -> f64) {
        if !self.needs(v) {
            return;
        }
        let slot = self.grad_slot(grads, v);
        for (i, (o, gv)) in slot.iter_mut().zip(g).enumerate() {
            *o += f(*gv, i);
        }
    }

    fn accumulate_const(&self, grads: &mut [Option<Vec<f64>>], v: Var, c: f64) {
        if !self.needs(v) {
            return;
        }
        for o in self.grad_slot(grads, v).iter_mut() {
            *o += c;
        }
    }
}
