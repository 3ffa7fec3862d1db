//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the tape and
//! are addressed through copyable [`Var`] handles. [`Tape::backward`] walks the records
//! in reverse, returns the accumulated [`Gradients`] and clears the tape, so handles
//! from that pass become invalid.

use std::sync::Arc;

use super::sparse::SparseMatrix;
use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Tensor>),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    LogSoftmaxRows(Var),
    Nll(Var, Arc<Vec<usize>>),
    L2NormalizeRows(Var, Vec<f64>),
    PairwiseDot(Var, Var),
    PairDots(Var, Var, Arc<Vec<(usize, usize)>>),
    GatherRows(Var, Arc<Vec<usize>>),
    MaskedMeanRows(Var, Arc<Tensor>),
    MaskedLogSumExpRows(Var, Arc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
}

/// Gradients produced by one backward pass, indexed by the leaf handles of that pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    generation: u64,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::Contract(
                "variable does not belong to the active tape (was backward already called?)".into(),
            ));
        }
        Ok(&self.nodes[v.id])
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.node(v).map(|n| &n.value)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let mut requires_grad = false;
        for &i in inputs {
            requires_grad |= self.node(i)?.requires_grad;
        }
        if matches!(op, Op::Leaf) {
            unreachable!("leaves are pushed through push_leaf");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    fn push_leaf(&mut self, op_name: &'static str, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf("param", value, true)
    }

    /// Registers a constant; no gradient is ever accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf("constant", value, false)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.cols() != bv.rows() {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = av.matmul_raw(bv);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Sparse-dense product `m · x`; the sparse operand carries no gradient.
    pub fn spmm(&mut self, m: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        if m.shape().1 != xv.rows() {
            return Err(Error::Shape {
                op: "spmm",
                left: m.shape(),
                right: xv.shape(),
            });
        }
        let out = m.mul_dense(xv);
        self.push("spmm", out, Op::SpMM(Arc::clone(m), x), &[x])
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Result<Var> {
        let av = self.value(a)?;
        same_shape("mul_const", av, &c)?;
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        self.push("mul_const", out, Op::MulConst(a, c), &[a])
    }

    /// Adds a `1×d` bias row to every row of an `n×d` input.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x)?, self.value(bias)?);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_row_bias",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push("add_row_bias", out, Op::AddRowBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a)?.map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.map(f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a)?.sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a)?;
        if av.is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(av.sum() / av.len() as f64);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a)?.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Mean negative log-likelihood; `labels[i]` indexes the column of row `i`.
    pub fn nll_loss(&mut self, logp: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let lv = self.value(logp)?;
        if labels.len() != lv.rows() {
            return Err(Error::Shape {
                op: "nll_loss",
                left: lv.shape(),
                right: (labels.len(), 1),
            });
        }
        if labels.is_empty() {
            return Err(Error::Contract("nll_loss over zero rows".into()));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= lv.cols() {
                return Err(Error::Index {
                    index: y,
                    len: lv.cols(),
                });
            }
            total -= lv.get(r, y);
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        self.push("nll_loss", out, Op::Nll(logp, labels), &[logp])
    }

    /// Scales each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a)?.clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            norms.push(n);
        }
        self.push("l2_normalize_rows", out, Op::L2NormalizeRows(a, norms), &[a])
    }

    /// All-pairs row dot products: `a[p×d] · b[q×d]ᵀ → p×q`.
    pub fn pairwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.cols() != bv.cols() {
            return Err(Error::Shape {
                op: "pairwise_dot",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = av.matmul_bt_raw(bv);
        self.push("pairwise_dot", out, Op::PairwiseDot(a, b), &[a, b])
    }

    /// Dot products for an explicit list of `(row of a, row of b)` pairs, as a column.
    pub fn pair_dots(&mut self, a: Var, b: Var, pairs: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.cols() != bv.cols() {
            return Err(Error::Shape {
                op: "pair_dots",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut data = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            if i >= av.rows() {
                return Err(Error::Index { index: i, len: av.rows() });
            }
            if j >= bv.rows() {
                return Err(Error::Index { index: j, len: bv.rows() });
            }
            data.push(dot(av.row(i), bv.row(j)));
        }
        let out = Tensor::from_vec(pairs.len(), 1, data)?;
        self.push("pair_dots", out, Op::PairDots(a, b, pairs), &[a, b])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::Index {
                index: bad,
                len: av.rows(),
            });
        }
        let out = av.select_rows(&idx);
        self.push("gather_rows", out, Op::GatherRows(a, idx), &[a])
    }

    /// Per-row mean over the entries where `mask != 0`; rows with an empty mask give 0.
    pub fn masked_mean_rows(&mut self, a: Var, mask: Arc<Tensor>) -> Result<Var> {
        let av = self.value(a)?;
        same_shape("masked_mean_rows", av, &mask)?;
        let mut out = Tensor::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            let (mut s, mut n) = (0.0, 0usize);
            for (&x, &m) in av.row(r).iter().zip(mask.row(r)) {
                if m != 0.0 {
                    s += x;
                    n += 1;
                }
            }
            if n > 0 {
                out.set(r, 0, s / n as f64);
            }
        }
        self.push("masked_mean_rows", out, Op::MaskedMeanRows(a, mask), &[a])
    }

    /// Per-row `log Σ exp` over the entries where `mask != 0`; rows with an empty mask give 0.
    pub fn masked_logsumexp_rows(&mut self, a: Var, mask: Arc<Tensor>) -> Result<Var> {
        let av = self.value(a)?;
        same_shape("masked_logsumexp_rows", av, &mask)?;
        let mut out = Tensor::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            let picked: Vec<f64> = av
                .row(r)
                .iter()
                .zip(mask.row(r))
                .filter(|(_, &m)| m != 0.0)
                .map(|(&x, _)| x)
                .collect();
            if !picked.is_empty() {
                out.set(r, 0, logsumexp(&picked));
            }
        }
        self.push("masked_logsumexp_rows", out, Op::MaskedLogSumExpRows(a, mask), &[a])
    }

    /// Drops every record and invalidates outstanding handles.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    /// Backpropagates from a scalar `loss`, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss)?;
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let generation = self.generation;
        // Only leaves keep their gradients; intermediates are dropped with the tape.
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        self.clear();
        Ok(Gradients { grads, generation })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.id].value;
        let wants = |v: Var| nodes[v.id].requires_grad;
        let mut acc = |v: Var, delta: Tensor| {
            if !nodes[v.id].requires_grad {
                return;
            }
            match &mut grads[v.id] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &nodes[id].value;

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.matmul_bt_raw(val(*b)));
                }
                if wants(*b) {
                    acc(*b, val(*a).matmul_at_raw(g));
                }
            }
            Op::SpMM(m, x) => acc(*x, m.transpose_mul_dense(g)),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, hadamard(g, val(*b)));
                }
                if wants(*b) {
                    acc(*b, hadamard(g, val(*a)));
                }
            }
            Op::MulConst(a, c) => acc(*a, hadamard(g, c)),
            Op::AddRowBias(x, b) => {
                acc(*x, g.clone());
                if wants(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(val(*a).data()) {
                    if x <= 0.0 {
                        *dv = 0.0;
                    }
                }
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, hadamard(g, out)),
            Op::Log(a) => {
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(val(*a).data()) {
                    *dv /= x;
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                let (r, c) = val(*a).shape();
                acc(*a, Tensor::filled(r, c, s));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let s = g.data()[0] / (r * c) as f64;
                acc(*a, Tensor::filled(r, c, s));
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (dv, &o) in d.row_mut(r).iter_mut().zip(out.row(r)) {
                        *dv -= o.exp() * gsum;
                    }
                }
                acc(*a, d);
            }
            Op::Nll(logp, labels) => {
                let (r, c) = val(*logp).shape();
                let mut d = Tensor::zeros(r, c);
                let s = -g.data()[0] / labels.len() as f64;
                for (i, &y) in labels.iter().enumerate() {
                    d.set(i, y, d.get(i, y) + s);
                }
                acc(*logp, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut d = Tensor::zeros(out.rows(), out.cols());
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let proj = dot(y, gr);
                    for ((dv, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(y) {
                        *dv = (gv - yv * proj) / n;
                    }
                }
                acc(*a, d);
            }
            Op::PairwiseDot(a, b) => {
                if wants(*a) {
                    acc(*a, g.matmul_raw(val(*b)));
                }
                if wants(*b) {
                    acc(*b, g.matmul_at_raw(val(*a)));
                }
            }
            Op::PairDots(a, b, pairs) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = Tensor::zeros(av.rows(), av.cols());
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let gp = g.get(p, 0);
                    if gp == 0.0 {
                        continue;
                    }
                    for (o, &x) in da.row_mut(i).iter_mut().zip(bv.row(j)) {
                        *o += gp * x;
                    }
                    for (o, &x) in db.row_mut(j).iter_mut().zip(av.row(i)) {
                        *o += gp * x;
                    }
                }
                if wants(*a) {
                    acc(*a, da);
                }
                if wants(*b) {
                    acc(*b, db);
                }
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let mut d = Tensor::zeros(av.rows(), av.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::MaskedMeanRows(a, mask) => {
                let av = val(*a);
                let mut d = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let n = mask.row(r).iter().filter(|&&m| m != 0.0).count();
                    if n == 0 {
                        continue;
                    }
                    let s = g.get(r, 0) / n as f64;
                    for (o, &m) in d.row_mut(r).iter_mut().zip(mask.row(r)) {
                        if m != 0.0 {
                            *o = s;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::MaskedLogSumExpRows(a, mask) => {
                let av = val(*a);
                let mut d = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    if !mask.row(r).iter().any(|&m| m != 0.0) {
                        continue;
                    }
                    let lse = out.get(r, 0);
                    let gr = g.get(r, 0);
                    for ((o, &x), &m) in d.row_mut(r).iter_mut().zip(av.row(r)).zip(mask.row(r)) {
                        if m != 0.0 {
                            *o = gr * (x - lse).exp();
                        }
                    }
                }
                acc(*a, d);
            }
        }
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("hadamard shapes")
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let x = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let i = tape.constant(Tensor::eye(2)).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y).unwrap(), &x);
    }

    #[test]
    fn small_matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = tape.constant(t(&[&[1.0], &[1.0]])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[-1.0, 0.0, 2.0]])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_softmax_of_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(3, 5, 0.7)).unwrap();
        let y = tape.log_softmax_rows(x).unwrap();
        for &v in tape.value(y).unwrap().data() {
            assert!((v - (1.0f64 / 5.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_approaches_zero_for_confident_correct_prediction() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0, 30.0] {
            let mut tape = Tape::new();
            let x = tape.constant(t(&[&[margin, 0.0, 0.0]])).unwrap();
            let lp = tape.log_softmax_rows(x).unwrap();
            let loss = tape.nll_loss(lp, Arc::new(vec![0])).unwrap();
            let l = tape.value(loss).unwrap().item().unwrap();
            assert!(l > 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn pairwise_dot_of_normalized_copies_has_unit_diagonal() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(&[&[3.0, 4.0], &[-1.0, 0.5], &[0.2, 0.2]]))
            .unwrap();
        let n = tape.l2_normalize_rows(x).unwrap();
        let s = tape.pairwise_dot(n, n).unwrap();
        let sv = tape.value(s).unwrap();
        for i in 0..3 {
            assert!((sv.get(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rows_normalize_to_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[0.0, 0.0], &[1.0, 1.0]])).unwrap();
        let n = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(n).unwrap().row(0), &[0.0, 0.0]);
        let s = tape.sum(n).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().is_finite());
        assert_eq!(g.get(x).unwrap().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[&[1.5, -2.0], &[0.0, 7.0]])).unwrap();
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn second_backward_without_forward_fails() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0)).unwrap();
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_backward_fails() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_receive_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0)).unwrap();
        let c = tape.constant(Tensor::scalar(4.0)).unwrap();
        let d = tape.detach(w).unwrap();
        let p = tape.mul(w, c).unwrap();
        let q = tape.mul(p, d).unwrap();
        let g = tape.backward(q).unwrap();
        assert_eq!(g.get(w).unwrap().item().unwrap(), 12.0);
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.param(Tensor::scalar(f64::NAN)),
            Err(Error::NonFinite { op: "param" })
        ));
        let x = tape.constant(Tensor::scalar(-1.0)).unwrap();
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
        let big = tape.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(tape.exp(big), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn masked_reductions_ignore_unmasked_and_empty_rows() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
        let mask = Arc::new(t(&[&[1.0, 0.0, 1.0], &[0.0, 0.0, 0.0]]));
        let m = tape.masked_mean_rows(x, Arc::clone(&mask)).unwrap();
        assert_eq!(tape.value(m).unwrap().data(), &[2.0, 0.0]);
        let l = tape.masked_logsumexp_rows(x, mask).unwrap();
        let lv = tape.value(l).unwrap();
        assert!((lv.get(0, 0) - (1f64.exp() + 3f64.exp()).ln()).abs() < 1e-12);
        assert_eq!(lv.get(1, 0), 0.0);
        let s = tape.add(m, l).unwrap();
        let s = tape.sum(s).unwrap();
        let g = tape.backward(s).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(gx.get(0, 1), 0.0);
    }
}
