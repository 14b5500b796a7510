//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward computation. Parameter
//! leaves borrow their values from a shared read-only [`ParamStore`], so many
//! graphs can be built concurrently against the same store; each backward pass
//! returns its own [`Grads`] for the caller to reduce.

use std::borrow::Cow;
use std::collections::HashMap;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    Abs(Var),
    Relu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    HardSelect {
        gate: Var,
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass: parameter gradients plus the gradient of
/// every recorded node (leaf inputs included).
pub struct Backward {
    pub params: Grads,
    nodes: Vec<Option<Tensor>>,
}

impl Backward {
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims2() != b.dims2() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
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
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant or input leaf. Its gradient is available from [`Backward::grad`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param_by_id(id))
    }

    pub fn param_by_id(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.value(id)),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("[{m}x{k}] * [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let r = self.value(row);
        if r.len() != n {
            return Err(Error::shape("add_row", format!("[{m}x{n}] + [{}]", r.len())));
        }
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let r = self.value(row);
        if r.len() != n {
            return Err(Error::shape("mul_row", format!("[{m}x{n}] * [{}]", r.len())));
        }
        let rv = r.data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v * rv[k % n])
            .collect();
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MulRow(a, row)))
    }

    /// `x * w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: Op) -> Result<Var> {
        same_shape(op, self.value(a), self.value(b))?;
        let (m, n) = self.value(a).dims2();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor::matrix(m, n, data)?, mk))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu(x).0, Op::Gelu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Per-row layer normalization with affine `gain` and `bias` (each `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", format!("width {n}")));
        }
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * is;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out = (0..m * n).map(|k| xhat[k] * g[k % n] + b[k % n]).collect();
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` get weight 0; a row
    /// whose every column is masked is all zeros.
    pub fn softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::shape("softmax", format!("mask {} vs {n} columns", mask.len())));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|mk| mk[j]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in (0..n).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                z += e;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax(x)))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.value(table).dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidInput(format!("row id {bad} out of range for {rows}-row table")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Tensor::matrix(ids.len(), n, out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if rows.iter().any(|&r| r >= m) {
            return Err(Error::shape("select_rows", format!("row out of range for {m} rows")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            Tensor::matrix(rows.len(), n, out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean of the given rows as a `1 x n` row. Fails on an empty selection.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if rows.is_empty() {
            return Err(Error::InvalidInput("mean over zero rows".into()));
        }
        if rows.iter().any(|&r| r >= m) {
            return Err(Error::shape("mean_rows", format!("row out of range for {m} rows")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n];
        for &r in rows {
            for (o, v) in out.iter_mut().zip(&xv[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        let k = rows.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        Ok(self.push(
            Tensor::row(out),
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).cols() != n) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n.max(1);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if start > end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n}")));
        }
        let w = end - start;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + end]);
        }
        Ok(self.push(Tensor::matrix(m, w, out)?, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean cross-entropy of row-wise softmax(logits) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.value(logits).dims2();
        if labels.len() != m {
            return Err(Error::shape("cross_entropy", format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {n} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &lv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..n {
                probs[i * n + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[labels[i]];
        }
        let value = if m == 0 { 0.0 } else { loss / m as f64 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Elementwise selection `take_a ? a : b`. The backward pass treats the
    /// selection as the blend `gate * a + (1 - gate) * b` for `gate`
    /// (straight-through) while routing the exact selection to `a` and `b`.
    pub fn hard_select(&mut self, gate: Var, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        same_shape("hard_select", self.value(a), self.value(b))?;
        same_shape("hard_select", self.value(a), self.value(gate))?;
        if take_a.len() != self.value(a).len() {
            return Err(Error::shape("hard_select", "selection length"));
        }
        let (m, n) = self.value(a).dims2();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = (0..m * n).map(|k| if take_a[k] { av[k] } else { bv[k] }).collect();
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::HardSelect {
                gate,
                a,
                b,
                take_a: take_a.to_vec(),
            },
        ))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", t.shape())));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backpropagates from arbitrary upstream gradients on any set of nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Backward> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::shape("backward_seeded", "seed shape"));
            }
            acc(&mut grads, *v, g.data());
        }
        let mut params = Grads::new(self.params.len());
        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gout, &mut grads, &mut params);
            grads[idx] = Some(gout);
        }
        Ok(Backward {
            params,
            nodes: grads,
        })
    }

    fn backprop_node(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>], params: &mut Grads) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.add(*id, gout),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                let mut ga = vec![0.0; m * k];
                matmul_bt_acc(go, self.value(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_at_acc(self.value(*a).data(), go, &mut gb, m, k, n);
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::MatMulBt(a, b) => {
                // out[m x n] = a[m x k] b[n x k]^T
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).rows();
                let mut ga = vec![0.0; m * k];
                matmul_acc(go, self.value(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; n * k];
                matmul_at_acc(go, self.value(*a).data(), &mut gb, m, n, k);
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::AddRow(a, row) => {
                let n = out.cols();
                let mut gr = vec![0.0; n];
                for chunk in go.chunks(n.max(1)) {
                    for (r, g) in gr.iter_mut().zip(chunk) {
                        *r += g;
                    }
                }
                acc(grads, *a, go);
                acc(grads, *row, &gr);
            }
            Op::MulRow(a, row) => {
                let n = out.cols();
                let av = self.value(*a).data();
                let rv = self.value(*row).data();
                let mut gr = vec![0.0; n];
                let mut ga = vec![0.0; go.len()];
                for (k, g) in go.iter().enumerate() {
                    ga[k] = g * rv[k % n];
                    gr[k % n] += g * av[k];
                }
                acc(grads, *a, &ga);
                acc(grads, *row, &gr);
            }
            Op::Add(a, b) => {
                acc(grads, *a, go);
                acc(grads, *b, go);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, go);
                let neg: Vec<f64> = go.iter().map(|g| -g).collect();
                acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga: Vec<f64> = go.iter().zip(bv).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = go.iter().zip(av).map(|(g, x)| g * x).collect();
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = go.iter().map(|g| g * s).collect();
                acc(grads, *a, &ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = out.dims2();
                let g = self.value(*gain).data();
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    let row = i * n..(i + 1) * n;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for (j, k) in row.clone().enumerate() {
                        let d = go[k] * g[j];
                        gg[j] += go[k] * xhat[k];
                        gb[j] += go[k];
                        mean_d += d;
                        mean_dx += d * xhat[k];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for (j, k) in row.enumerate() {
                        let d = go[k] * g[j];
                        gx[k] = inv_std[i] * (d - mean_d - xhat[k] * mean_dx);
                    }
                }
                acc(grads, *x, &gx);
                acc(grads, *gain, &gg);
                acc(grads, *bias, &gb);
            }
            Op::Softmax(x) => {
                let (m, n) = out.dims2();
                let y = out.data();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = y[r.clone()].iter().zip(&go[r.clone()]).map(|(a, b)| a * b).sum();
                    for k in r {
                        gx[k] = y[k] * (go[k] - dot);
                    }
                }
                acc(grads, *x, &gx);
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let ga: Vec<f64> = go.iter().zip(xv).map(|(g, &x)| g * gelu(x).1).collect();
                acc(grads, *a, &ga);
            }
            Op::LeakyRelu(a, slope) => {
                let xv = self.value(*a).data();
                let ga: Vec<f64> = go
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                acc(grads, *a, &ga);
            }
            Op::Elu(a) => {
                let xv = self.value(*a).data();
                let ga: Vec<f64> = go
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * x.exp() })
                    .collect();
                acc(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = go.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(grads, *a, &ga);
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                let ga: Vec<f64> = go
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                acc(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let ga: Vec<f64> = go.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                acc(grads, *a, &ga);
            }
            Op::Gather { table, ids } => {
                let (rows, n) = self.value(*table).dims2();
                let mut gt = vec![0.0; rows * n];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        gt[id * n + j] += go[i * n + j];
                    }
                }
                acc(grads, *table, &gt);
            }
            Op::SelectRows { x, rows } => {
                let (m, n) = self.value(*x).dims2();
                let mut gx = vec![0.0; m * n];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        gx[r * n + j] += go[i * n + j];
                    }
                }
                acc(grads, *x, &gx);
            }
            Op::MeanRows { x, rows } => {
                let (m, n) = self.value(*x).dims2();
                let mut gx = vec![0.0; m * n];
                let k = rows.len() as f64;
                for &r in rows {
                    for j in 0..n {
                        gx[r * n + j] += go[j] / k;
                    }
                }
                acc(grads, *x, &gx);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&go[i * n + offset..i * n + offset + w]);
                    }
                    acc(grads, p, &gp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(grads, p, &go[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2();
                let w = out.cols();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + w].copy_from_slice(&go[i * w..(i + 1) * w]);
                }
                acc(grads, *x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![go[0]; self.value(*x).len()];
                acc(grads, *x, &gx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (m, n) = self.value(*logits).dims2();
                if m == 0 {
                    return;
                }
                let scale = go[0] / m as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * n + l] -= scale;
                }
                acc(grads, *logits, &gl);
            }
            Op::HardSelect { gate, a, b, take_a } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga: Vec<f64> = go.iter().zip(take_a).map(|(g, &t)| if t { *g } else { 0.0 }).collect();
                let gb: Vec<f64> = go.iter().zip(take_a).map(|(g, &t)| if t { 0.0 } else { *g }).collect();
                let gg: Vec<f64> = (0..go.len()).map(|k| go[k] * (av[k] - bv[k])).collect();
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
                acc(grads, *gate, &gg);
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::row(g.to_vec())),
    }
}
