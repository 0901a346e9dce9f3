//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every node holds a rank-2 value; vectors are `1 × n`. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ops::{softmax_in_place, EPS_NORM};
use super::tensor::matmul_into;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Arithmetic precision of recorded values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every node value is rounded to the nearest `f32` after it is computed.
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddRowBroadcast(Var, Var),
    AddColBroadcast(Var, Var),
    Exp(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    precision: Precision,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            precision,
            ..Graph::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).expect("internal shape bookkeeping")
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.as_matrix();
        self.push(t, Op::Leaf)
    }

    /// Learnable input read from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))?
            .as_matrix();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Self::mat(m, n, out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    /// `x[n×m] + b[1×m]` with `b` repeated down the rows.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(b) != (1, m) {
            return Err(Error::invalid(format!(
                "row broadcast expects 1x{m}, got {:?}",
                self.shape(b)
            )));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        Ok(self.push(Self::mat(n, m, out), Op::AddRowBroadcast(x, b)))
    }

    /// `x[n×m] + c[n×1]` with `c` repeated across the columns.
    pub fn add_col_broadcast(&mut self, x: Var, c: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(c) != (n, 1) {
            return Err(Error::invalid(format!(
                "column broadcast expects {n}x1, got {:?}",
                self.shape(c)
            )));
        }
        let cv = self.value(c).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &cc) in out.chunks_mut(m.max(1)).zip(cv) {
            for o in row.iter_mut() {
                *o += cc;
            }
        }
        Ok(self.push(Self::mat(n, m, out), Op::AddColBroadcast(x, c)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Ln(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            softmax_in_place(row, 1.0);
        }
        self.push(Self::mat(n, m, out), Op::SoftmaxRows(a))
    }

    /// Row-wise `log Σ_j exp(x_ij)`, producing an `n × 1` column.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let x = self.value(a).data();
        let out = (0..n).map(|i| log_sum_exp(&x[i * m..(i + 1) * m])).collect();
        self.push(Self::mat(n, 1, out), Op::LogSumExpRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(gain) != (1, m) || self.shape(bias) != (1, m) {
            return Err(Error::invalid(format!(
                "layer norm over width {m} got gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..m {
                let h = (row[j] - mean) * inv;
                xhat[i * m + j] = h;
                out[i * m + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            Self::mat(n, m, out),
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        self.push(t, Op::Gelu(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = x.to_vec();
        for row in out.chunks_mut(m.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > EPS_NORM) {
                return Err(Error::DegenerateVector { norm, eps: EPS_NORM });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        Ok(self.push(Self::mat(n, m, out), Op::L2NormalizeRows { x: a, norms }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, _) = self.shape(a);
        if start + len > n {
            return Err(Error::invalid(format!(
                "row slice {start}..{} out of {n} rows",
                start + len
            )));
        }
        let t = self.value(a).slice_rows(start, len);
        Ok(self.push(t, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.shape(a);
        if start + len > m {
            return Err(Error::invalid(format!(
                "column slice {start}..{} out of {m} columns",
                start + len
            )));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&x[i * m + start..i * m + start + len]);
        }
        Ok(self.push(Self::mat(n, len, out), Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let m = self.shape(first).1;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != m {
                return Err(Error::invalid(format!("row concat width mismatch: {c} vs {m}")));
            }
            out.extend_from_slice(self.value(p).data());
            n += r;
        }
        Ok(self.push(Self::mat(n, m, out), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let n = self.shape(first).0;
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != n {
                return Err(Error::invalid(format!("column concat height mismatch: {r} vs {n}")));
            }
            m += c;
        }
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Self::mat(n, m, out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Column means, producing a `1 × m` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; m];
        for row in x.chunks(m.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        self.push(Self::mat(1, m, out), Op::MeanRows(a))
    }

    /// Rows of `table` picked by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("row index {bad} out of {n}")));
        }
        let x = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            out.extend_from_slice(&x[i * m..(i + 1) * m]);
        }
        Ok(self.push(
            Self::mat(indices.len(), m, out),
            Op::GatherRows(table, indices.to_vec()),
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "loss node {} was not recorded on this graph",
                loss.0
            )));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Writes `∂loss/∂param` into every gradient slot of `store`. Parameters
    /// that did not take part in the forward pass receive zeros.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (name, &var) in &self.params {
            if let Some(g) = grads.get(var) {
                store.set_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let (n, m) = (node.value.rows(), node.value.cols());
        let d = dy.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.cols();
                // dA = dY Bᵀ, dB = Aᵀ dY
                let mut da = vec![0.0; n * k];
                matmul_into(d, bv.transpose().data(), &mut da, n, m, k);
                let mut db = vec![0.0; k * m];
                matmul_into(av.transpose().data(), d, &mut db, k, n, m);
                accumulate(grads, *a, Self::mat(n, k, da));
                accumulate(grads, *b, Self::mat(k, m, db));
            }
            Op::Transpose(a) => accumulate(grads, *a, dy.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.clone());
                accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, dy.clone());
                accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = dy.zip_map(self.value(*b), |g, y| g * y).expect("same shape");
                let db = dy.zip_map(self.value(*a), |g, x| g * x).expect("same shape");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let da = dy.zip_map(bv, |g, y| g / y).expect("same shape");
                let out = &node.value;
                let db = dy
                    .zip_map(out, |g, q| g * q)
                    .and_then(|t| t.zip_map(bv, |gq, y| -gq / y))
                    .expect("same shape");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => accumulate(grads, *a, dy.map(|v| v * s)),
            Op::AddRowBroadcast(x, b) => {
                let mut db = vec![0.0; m];
                for row in d.chunks(m.max(1)) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dy.clone());
                accumulate(grads, *b, Self::mat(1, m, db));
            }
            Op::AddColBroadcast(x, c) => {
                let dc = d.chunks(m.max(1)).map(|row| row.iter().sum()).collect();
                accumulate(grads, *x, dy.clone());
                accumulate(grads, *c, Self::mat(n, 1, dc));
            }
            Op::Exp(a) => {
                let da = dy.zip_map(&node.value, |g, y| g * y).expect("same shape");
                accumulate(grads, *a, da);
            }
            Op::Ln(a) => {
                let da = dy.zip_map(self.value(*a), |g, x| g / x).expect("same shape");
                accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let mut da = vec![0.0; n * m];
                for r in 0..n {
                    let yr = &y[r * m..(r + 1) * m];
                    let gr = &d[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..m {
                        da[r * m + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Self::mat(n, m, da));
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let w = x.cols();
                let lse = node.value.data();
                let mut da = vec![0.0; n * w];
                for r in 0..n {
                    for j in 0..w {
                        da[r * w + j] = d[r] * (x.get(r, j) - lse[r]).exp();
                    }
                }
                accumulate(grads, *a, Self::mat(n, w, da));
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; m];
                let mut dbias = vec![0.0; m];
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let h = &xhat[r * m..(r + 1) * m];
                    let g = &d[r * m..(r + 1) * m];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..m {
                        dgain[j] += g[j] * h[j];
                        dbias[j] += g[j];
                        let dh = g[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= m as f64;
                    mean_dh_h /= m as f64;
                    for j in 0..m {
                        let dh = g[j] * gv[j];
                        dx[r * m + j] = inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                accumulate(grads, *x, Self::mat(n, m, dx));
                accumulate(grads, *gain, Self::mat(1, m, dgain));
                accumulate(grads, *bias, Self::mat(1, m, dbias));
            }
            Op::Gelu(a) => {
                let da = dy
                    .zip_map(self.value(*a), |g, x| {
                        let u = GELU_K * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .expect("same shape");
                accumulate(grads, *a, da);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let yr = &y[r * m..(r + 1) * m];
                    let gr = &d[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx[r * m + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                accumulate(grads, *x, Self::mat(n, m, dx));
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut da = vec![0.0; rows * cols];
                da[start * cols..(start + n) * cols].copy_from_slice(d);
                accumulate(grads, *a, Self::mat(rows, cols, da));
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + m].copy_from_slice(&d[r * m..(r + 1) * m]);
                }
                accumulate(grads, *a, Self::mat(rows, cols, da));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let part = d[offset * c..(offset + r) * c].to_vec();
                    accumulate(grads, p, Self::mat(r, c, part));
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut part = Vec::with_capacity(r * c);
                    for row in 0..r {
                        part.extend_from_slice(&d[row * m + offset..row * m + offset + c]);
                    }
                    accumulate(grads, p, Self::mat(r, c, part));
                    offset += c;
                }
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Tensor::filled(&[r, c], d[0]));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let mut da = Vec::with_capacity(r * c);
                for _ in 0..r {
                    da.extend(d.iter().map(|v| v / r as f64));
                }
                accumulate(grads, *a, Self::mat(r, c, da));
            }
            Op::GatherRows(table, indices) => {
                let (r, c) = self.shape(*table);
                let mut dt = vec![0.0; r * c];
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..c {
                        dt[idx * c + j] += d[row * c + j];
                    }
                }
                accumulate(grads, *table, Self::mat(r, c, dt));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
