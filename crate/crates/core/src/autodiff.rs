// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is a valid topological order by construction. [`Tape::backward`]
//! walks the recorded nodes once, in reverse, and returns the gradient of a
//! scalar output with respect to every node that was marked as requiring
//! gradients. Tapes carry no global state; each one is confined to the thread
//! that created it.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// LayerNorm epsilon used by every encoder.
pub const LN_EPS: f64 = 1e-5;

/// Norms below this are rejected by [`Var::l2_normalize_rows`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    Exp(usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(usize, f64),
    SoftmaxCols(usize, f64),
    LogSoftmaxRows(usize, f64),
    L2NormalizeRows(usize, Vec<f64>),
    CrossEntropyRows {
        logits: usize,
        targets: usize,
        log_probs: Vec<f64>,
    },
    LogSumExpRows(usize),
    GroupMean(usize, usize),
    SegmentMean(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// An explicit, per-session recording of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it does not influence the output
    /// or was not marked as requiring gradients.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when absent.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never accumulates gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = inputs.iter().any(|&i| self.requires(i));
        self.push(value, op, rg)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[output.id].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must be scalar, got {:?}", nodes[output.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut emit = |input: usize, contrib: Tensor| {
                if !nodes[input].requires_grad {
                    return;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                &Op::MatMul(a, b) => {
                    if nodes[a].requires_grad {
                        emit(a, g.matmul_t(val(b))?);
                    }
                    if nodes[b].requires_grad {
                        emit(b, val(a).t_matmul(&g)?);
                    }
                }
                &Op::MatMulT(a, b) => {
                    // out = a·bᵀ: da = g·b, db = gᵀ·a
                    if nodes[a].requires_grad {
                        emit(a, g.matmul(val(b))?);
                    }
                    if nodes[b].requires_grad {
                        emit(b, g.t_matmul(val(a))?);
                    }
                }
                &Op::Transpose(a) => emit(a, g.transpose()),
                &Op::Add(a, b) => {
                    emit(a, g.clone());
                    emit(b, g);
                }
                &Op::Sub(a, b) => {
                    emit(a, g.clone());
                    emit(b, g.map(|v| -v));
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    emit(a, zip_map(&g, vb, |x, y| x * y));
                    emit(b, zip_map(&g, va, |x, y| x * y));
                }
                &Op::AddRow(a, r) => {
                    let cols = g.cols();
                    let mut dr = vec![0.0; cols];
                    for i in 0..g.rows() {
                        for (d, v) in dr.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    emit(r, Tensor::new(val(r).shape().to_vec(), dr)?);
                    emit(a, g);
                }
                &Op::Scale(a, c) => emit(a, g.map(|v| v * c)),
                &Op::MulScalar(a, s) => {
                    let sv = val(s).data()[0];
                    if nodes[s].requires_grad {
                        let ds = dot(g.data(), val(a).data());
                        emit(s, Tensor::new(val(s).shape().to_vec(), vec![ds])?);
                    }
                    emit(a, g.map(|v| v * sv));
                }
                &Op::Exp(a) => {
                    let y = &node.value;
                    emit(a, zip_map(&g, y, |gv, yv| gv * yv));
                }
                &Op::Gelu(a) => emit(a, zip_map(&g, val(a), |gv, x| gv * gelu_grad(x))),
                &Op::Sum(a) => {
                    let s = g.data()[0];
                    emit(a, Tensor::full(val(a).shape(), s));
                }
                &Op::Mean(a) => {
                    let va = val(a);
                    let s = g.data()[0] / va.len() as f64;
                    emit(a, Tensor::full(va.shape(), s));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gam = val(*gamma).data();
                    let d = gam.len();
                    let rows = g.rows();
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut dx = vec![0.0; rows * d];
                    for i in 0..rows {
                        let gi = g.row(i);
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            dgamma[j] += gi[j] * xh[j];
                            dbeta[j] += gi[j];
                            let dxh = gi[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gi[j] * gam[j];
                            dx[i * d + j] = rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    emit(*gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma)?);
                    emit(*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?);
                    emit(*x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                }
                &Op::SoftmaxRows(a, temp) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.shape());
                    for i in 0..y.rows() {
                        let (yi, gi) = (y.row(i), g.row(i));
                        let s = dot(yi, gi);
                        for (o, (yv, gv)) in dx.row_mut(i).iter_mut().zip(yi.iter().zip(gi)) {
                            *o = yv * (gv - s) / temp;
                        }
                    }
                    emit(a, dx);
                }
                &Op::SoftmaxCols(a, temp) => {
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(y.shape());
                    for j in 0..n {
                        let s: f64 = (0..m).map(|i| y.get(i, j) * g.get(i, j)).sum();
                        for i in 0..m {
                            dx.set(i, j, y.get(i, j) * (g.get(i, j) - s) / temp);
                        }
                    }
                    emit(a, dx);
                }
                &Op::LogSoftmaxRows(a, temp) => {
                    let lp = &node.value;
                    let mut dx = Tensor::zeros(lp.shape());
                    for i in 0..lp.rows() {
                        let gi = g.row(i);
                        let gs: f64 = gi.iter().sum();
                        for (o, (l, gv)) in dx.row_mut(i).iter_mut().zip(lp.row(i).iter().zip(gi)) {
                            *o = (gv - l.exp() * gs) / temp;
                        }
                    }
                    emit(a, dx);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.shape());
                    for i in 0..y.rows() {
                        let (yi, gi) = (y.row(i), g.row(i));
                        let s = dot(yi, gi);
                        for (o, (yv, gv)) in dx.row_mut(i).iter_mut().zip(yi.iter().zip(gi)) {
                            *o = (gv - yv * s) / norms[i];
                        }
                    }
                    emit(*a, dx);
                }
                Op::CrossEntropyRows {
                    logits,
                    targets,
                    log_probs,
                } => {
                    let t = val(*targets);
                    let (m, n) = (t.rows(), t.cols());
                    let scale = g.data()[0] / m as f64;
                    if nodes[*logits].requires_grad {
                        let mut dl = Tensor::zeros(&[m, n]);
                        for i in 0..m {
                            let ti = t.row(i);
                            let mass: f64 = ti.iter().sum();
                            let lp = &log_probs[i * n..(i + 1) * n];
                            for (o, (l, tv)) in dl.row_mut(i).iter_mut().zip(lp.iter().zip(ti)) {
                                *o = scale * (mass * l.exp() - tv);
                            }
                        }
                        emit(*logits, dl.reshape(val(*logits).shape().to_vec())?);
                    }
                    if nodes[*targets].requires_grad {
                        let dt: Vec<f64> = log_probs.iter().map(|l| -scale * l).collect();
                        emit(*targets, Tensor::new(t.shape().to_vec(), dt)?);
                    }
                }
                &Op::LogSumExpRows(a) => {
                    let x = val(a);
                    let lse = &node.value;
                    let mut dx = Tensor::zeros(x.shape());
                    for i in 0..x.rows() {
                        let l = lse.data()[i];
                        let gi = g.data()[i];
                        for (o, xv) in dx.row_mut(i).iter_mut().zip(x.row(i)) {
                            *o = gi * (xv - l).exp();
                        }
                    }
                    emit(a, dx);
                }
                &Op::GroupMean(a, group) => {
                    let x = val(a);
                    let c = x.cols();
                    let mut dx = Tensor::zeros(x.shape());
                    let inv = 1.0 / group as f64;
                    for r in 0..x.rows() {
                        let gi = g.row(r / group);
                        for (o, gv) in dx.row_mut(r).iter_mut().zip(gi) {
                            *o = gv * inv;
                        }
                    }
                    debug_assert_eq!(dx.cols(), c);
                    emit(a, dx);
                }
                Op::SegmentMean(a, offsets) => {
                    let x = val(*a);
                    let mut dx = Tensor::zeros(x.shape());
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let inv = 1.0 / (hi - lo) as f64;
                        let gi = g.row(s);
                        for r in lo..hi {
                            for (o, gv) in dx.row_mut(r).iter_mut().zip(gi) {
                                *o = gv * inv;
                            }
                        }
                    }
                    emit(*a, dx);
                }
                Op::GatherRows(table, idx) => {
                    let t = val(*table);
                    let mut dt = Tensor::zeros(t.shape());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, gv) in dt.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    emit(*table, dt);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(op, "non-finite input"))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Row-wise softmax of `x / temp` with max subtraction. Returns log-probs too.
pub(crate) fn softmax_rows_raw(x: &Tensor, temp: f64) -> (Tensor, Tensor) {
    let (m, n) = (x.rows(), x.cols());
    let mut p = Tensor::zeros(&[m, n]);
    let mut lp = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx / temp + row.iter().map(|v| ((v - mx) / temp).exp()).sum::<f64>().ln();
        for j in 0..n {
            let l = row[j] / temp - lse;
            lp.set(i, j, l);
            p.set(i, j, l.exp());
        }
    }
    (p, lp)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    /// Same value, recorded as a constant (stop-gradient).
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn rec(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        self.tape.record(value, op, inputs)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.rec(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul_t(&other.value())?;
        Ok(self.rec(out, Op::MatMulT(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(&self) -> Var<'t> {
        let out = self.value().transpose();
        self.rec(out, Op::Transpose(self.id), &[self.id])
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x + y);
        Ok(self.rec(out, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x - y);
        Ok(self.rec(out, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Element-wise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x * y);
        Ok(self.rec(out, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        if r.len() != a.cols() {
            return Err(Error::dim(
                "add_row",
                format!("row of {} onto {:?}", r.len(), a.shape()),
            ));
        }
        let mut out = (*a).clone();
        let n = a.cols();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, v) in chunk.iter_mut().zip(r.data()) {
                *o += v;
            }
        }
        Ok(self.rec(out, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.rec(out, Op::Scale(self.id, c), &[self.id])
    }

    /// Multiplies every element by a single-element var.
    pub fn mul_scalar(&self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.len() != 1 {
            return Err(Error::dim("mul_scalar", format!("scalar expected, got {:?}", sv.shape())));
        }
        let c = sv.data()[0];
        let out = self.value().map(|v| v * c);
        Ok(self.rec(out, Op::MulScalar(self.id, s.id), &[self.id, s.id]))
    }

    pub fn exp(&self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.rec(out, Op::Exp(self.id), &[self.id])
    }

    pub fn gelu(&self) -> Var<'t> {
        let out = self.value().map(gelu);
        self.rec(out, Op::Gelu(self.id), &[self.id])
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.rec(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.rec(out, Op::Mean(self.id), &[self.id])
    }

    /// Per-row standardization followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let d = x.cols();
        if g.len() != d || b.len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!("width {d}, gamma {}, beta {}", g.len(), b.len()),
            ));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(x.shape());
        for i in 0..rows {
            let r = x.row(i);
            let mu = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            let o = out.row_mut(i);
            for j in 0..d {
                let xh = (r[j] - mu) * rs;
                xhat[i * d + j] = xh;
                o[j] = g.data()[j] * xh + b.data()[j];
            }
        }
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.rec(out, op, &[self.id, gamma.id, beta.id]))
    }

    pub fn softmax_rows(&self, temperature: f64) -> Result<Var<'t>> {
        check_temp(temperature)?;
        let x = self.value();
        check_finite("softmax_rows", &x)?;
        let (p, _) = softmax_rows_raw(&x, temperature);
        Ok(self.rec(p, Op::SoftmaxRows(self.id, temperature), &[self.id]))
    }

    pub fn softmax_cols(&self, temperature: f64) -> Result<Var<'t>> {
        check_temp(temperature)?;
        let x = self.value();
        check_finite("softmax_cols", &x)?;
        let (p, _) = softmax_rows_raw(&x.transpose(), temperature);
        Ok(self.rec(p.transpose(), Op::SoftmaxCols(self.id, temperature), &[self.id]))
    }

    pub fn log_softmax_rows(&self, temperature: f64) -> Result<Var<'t>> {
        check_temp(temperature)?;
        let x = self.value();
        check_finite("log_softmax_rows", &x)?;
        let (_, lp) = softmax_rows_raw(&x, temperature);
        Ok(self.rec(lp, Op::LogSoftmaxRows(self.id, temperature), &[self.id]))
    }

    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        let mut out = (*x).clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let n = dot(x.row(i), x.row(i)).sqrt();
            if !(n.is_finite() && n > MIN_NORM) {
                return Err(Error::numeric("l2_normalize_rows", format!("row {i} has norm {n}")));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.rec(out, Op::L2NormalizeRows(self.id, norms), &[self.id]))
    }

    /// `−(1/m) Σᵢⱼ tᵢⱼ · log softmax(self)ᵢⱼ`; `targets` may be differentiable.
    pub fn cross_entropy_rows(&self, targets: Var<'t>) -> Result<Var<'t>> {
        let (l, t) = (self.value(), targets.value());
        if l.rows() != t.rows() || l.cols() != t.cols() {
            return Err(Error::dim(
                "cross_entropy_rows",
                format!("logits {:?} vs targets {:?}", l.shape(), t.shape()),
            ));
        }
        check_finite("cross_entropy_rows", &l)?;
        let (_, lp) = softmax_rows_raw(&l, 1.0);
        let m = l.rows();
        let total: f64 = lp.data().iter().zip(t.data()).map(|(a, b)| a * b).sum();
        let out = Tensor::scalar(-total / m as f64);
        let op = Op::CrossEntropyRows {
            logits: self.id,
            targets: targets.id,
            log_probs: lp.into_data(),
        };
        Ok(self.rec(out, op, &[self.id, targets.id]))
    }

    /// `log Σⱼ exp(xᵢⱼ)` per row, as a length-`m` vector.
    pub fn log_sum_exp_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        check_finite("log_sum_exp_rows", &x)?;
        let out: Vec<f64> = (0..x.rows()).map(|i| log_sum_exp(x.row(i))).collect();
        Ok(self.rec(Tensor::vector(out), Op::LogSumExpRows(self.id), &[self.id]))
    }

    /// Averages consecutive groups of `group` rows.
    pub fn group_mean(&self, group: usize) -> Result<Var<'t>> {
        let x = self.value();
        if group == 0 || !x.rows().is_multiple_of(group) {
            return Err(Error::dim(
                "group_mean",
                format!("{} rows not divisible into groups of {group}", x.rows()),
            ));
        }
        let c = x.cols();
        let out_rows = x.rows() / group;
        let mut out = Tensor::zeros(&[out_rows, c]);
        for r in 0..x.rows() {
            let o = out.row_mut(r / group);
            for (a, v) in o.iter_mut().zip(x.row(r)) {
                *a += v;
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v /= group as f64);
        Ok(self.rec(out, Op::GroupMean(self.id, group), &[self.id]))
    }

    /// Averages row ranges `offsets[s]..offsets[s+1]`.
    pub fn segment_mean(&self, offsets: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let valid = offsets.len() >= 2
            && offsets[0] == 0
            && *offsets.last().unwrap() == x.rows()
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(Error::dim("segment_mean", format!("bad offsets {offsets:?}")));
        }
        let c = x.cols();
        let segs = offsets.len() - 1;
        let mut out = Tensor::zeros(&[segs, c]);
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let o = out.row_mut(s);
            for r in lo..hi {
                for (a, v) in o.iter_mut().zip(x.row(r)) {
                    *a += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= (hi - lo) as f64);
        }
        Ok(self.rec(out, Op::SegmentMean(self.id, offsets.to_vec()), &[self.id]))
    }

    /// Row lookup into a table (embedding gather).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::dim("gather_rows", format!("index {bad} >= {}", t.rows())));
        }
        let out = t.select_rows(idx);
        let out = out.reshape(vec![idx.len(), t.cols()])?;
        Ok(self.rec(out, Op::GatherRows(self.id, idx.to_vec()), &[self.id]))
    }
}

fn check_temp(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be > 0, got {t}")))
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}
