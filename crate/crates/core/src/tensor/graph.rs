//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node order is a valid
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients by summation wherever a value fans out.

use std::borrow::Cow;

use rand::Rng;

use super::{kernels, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        broadcast_b: bool,
    },
    TransposeLast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax {
        x: Var,
        axis: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    ExpandLeading(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the leaves that requested them.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Recording of a computation. Leaves may borrow their values (`'a`) so
/// large parameter sets are not copied for every forward pass.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, axis_len, inner)` decomposition around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Disables the per-operation finiteness check.
    pub fn without_finite_check(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Pass `&tensor` to borrow or `tensor` to move.
    pub fn leaf(&mut self, value: impl Into<Cow<'a, Tensor<T>>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: impl Into<Cow<'a, Tensor<T>>>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: impl Into<Cow<'a, Tensor<T>>>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracking(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (bias rows, positional embeddings).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let inner = tb.numel();
        let bd = tb.data();
        let mut data = ta.data().to_vec();
        parallel::for_each_row(&mut data, inner, |_, row| add_into(row, bd));
        let out = Tensor::new(sa.to_vec(), data)?;
        self.push("add_broadcast", out, Op::AddBroadcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// Matrix product over the last two axes. `b` is either a plain matrix
    /// shared by every leading index of `a`, or has the same leading
    /// dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let batch: usize = lead_a.iter().product();
        let broadcast_b = lead_b.is_empty();
        if !broadcast_b && lead_a != lead_b {
            return Err(Error::shape("matmul", sa, sb));
        }
        let data = if broadcast_b {
            kernels::matmul(ta.data(), tb.data(), batch * m, k, n)
        } else {
            kernels::batched_matmul(ta.data(), tb.data(), batch, m, k, n)
        };
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(shape, data)?;
        self.push(
            "matmul",
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                broadcast_b,
            },
            &[a, b],
        )
    }

    /// `x · w + bias` with `w: [in, out]` and `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_broadcast(y, bias)
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::Contract(format!(
                "transpose needs rank >= 2, got {s:?}"
            )));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = t.numel() / (r * c);
        let mut shape = s.to_vec();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let out = Tensor::new(shape, kernels::transpose(t.data(), batch, r, c))?;
        self.push("transpose", out, Op::TransposeLast(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape("reshape", t.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.rank()];
        if axes.len() != t.rank()
            || axes
                .iter()
                .any(|&ax| ax >= t.rank() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::Contract(format!(
                "permute axes {axes:?} invalid for shape {:?}",
                t.shape()
            )));
        }
        let (data, shape) = kernels::permute(t.data(), t.shape(), axes);
        let out = Tensor::new(shape, data)?;
        self.push("permute", out, Op::Permute(a, axes.to_vec()), &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} invalid for shape {:?}",
                t.shape()
            )));
        }
        let out = softmax_forward(t, axis);
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// GELU in the exact form `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Layer normalisation over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / d;
        let (g, b) = (tg.data(), tb.data());
        let mut xhat = tx.data().to_vec();
        let mut rstd = vec![T::zero(); rows];
        let nd = T::from_usize(d).unwrap();
        for (row, r) in xhat.chunks_mut(d).zip(rstd.iter_mut()) {
            let mean = row.iter().copied().sum::<T>() / nd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            *r = inv;
        }
        let mut y = xhat.clone();
        for row in y.chunks_mut(d) {
            for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        let keep = self.tracking(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if keep { xhat } else { Vec::new() },
            rstd: if keep { rstd } else { Vec::new() },
        };
        self.push("layer_norm", out, op, &[x, gamma, beta])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(
            *inputs
                .first()
                .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
        );
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} invalid for {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let blk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Picks one index along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || index >= t.shape()[axis] {
            return Err(Error::Contract(format!(
                "select({axis}, {index}) invalid for {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = split_at_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        self.push("select", out, Op::Select { x, axis, index }, &[x])
    }

    /// Repeats `x` along a new leading axis of size `n`.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let out = Tensor::new(shape, data)?;
        self.push("expand", out, Op::ExpandLeading(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel()).unwrap();
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean cross-entropy of `logits: [B, K]` against integer targets,
    /// evaluated through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::Contract(format!(
                "cross_entropy expects logits [B, K] with B = {} targets, got {:?}",
                targets.len(),
                t.shape()
            )));
        }
        let k = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::Contract(format!(
                "target class {bad} out of range for {k} classes"
            )));
        }
        let mut probs = t.data().to_vec();
        let mut loss = T::zero();
        for (row, &target) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[target]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss = loss / T::from_usize(targets.len()).unwrap();
        let keep = self.tracking(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs: if keep { probs } else { Vec::new() },
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. `p == 0` records nothing and returns `x`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!(
                "dropout probability {p} must be < 1"
            )));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let t = self.value(x);
        let mask: Vec<T> = (0..t.numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// that was recorded with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, Cow::Borrowed(&g));
                    self.accumulate(&mut grads, *b, Cow::Owned(g));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, Cow::Borrowed(&g));
                    let neg = g.iter().map(|&v| -v).collect();
                    self.accumulate(&mut grads, *b, Cow::Owned(neg));
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let vb = self.value(*b).data();
                        let ga = g.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                        self.accumulate(&mut grads, *a, Cow::Owned(ga));
                    }
                    if self.requires_grad(*b) {
                        let va = self.value(*a).data();
                        let gb = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                        self.accumulate(&mut grads, *b, Cow::Owned(gb));
                    }
                }
                Op::AddBroadcast(a, b) => {
                    if self.requires_grad(*b) {
                        let inner = self.value(*b).numel();
                        let mut gb = vec![T::zero(); inner];
                        for row in g.chunks(inner) {
                            add_into(&mut gb, row);
                        }
                        self.accumulate(&mut grads, *b, Cow::Owned(gb));
                    }
                    self.accumulate(&mut grads, *a, Cow::Owned(g));
                }
                Op::Scale(a, c) => {
                    let ga = g.iter().map(|&v| v * *c).collect();
                    self.accumulate(&mut grads, *a, Cow::Owned(ga));
                }
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    broadcast_b,
                } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    if *broadcast_b {
                        if self.requires_grad(*a) {
                            let bt = kernels::transpose(vb, 1, k, n);
                            let ga = kernels::matmul(&g, &bt, batch * m, n, k);
                            self.accumulate(&mut grads, *a, Cow::Owned(ga));
                        }
                        if self.requires_grad(*b) {
                            let at = kernels::transpose(va, 1, batch * m, k);
                            let gb = kernels::matmul(&at, &g, k, batch * m, n);
                            self.accumulate(&mut grads, *b, Cow::Owned(gb));
                        }
                    } else {
                        if self.requires_grad(*a) {
                            let bt = kernels::transpose(vb, batch, k, n);
                            let ga = kernels::batched_matmul(&g, &bt, batch, m, n, k);
                            self.accumulate(&mut grads, *a, Cow::Owned(ga));
                        }
                        if self.requires_grad(*b) {
                            let at = kernels::transpose(va, batch, m, k);
                            let gb = kernels::batched_matmul(&at, &g, batch, k, m, n);
                            self.accumulate(&mut grads, *b, Cow::Owned(gb));
                        }
                    }
                }
                Op::TransposeLast(a) => {
                    let s = node.value.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    let batch = g.len() / (r * c);
                    let ga = kernels::transpose(&g, batch, r, c);
                    self.accumulate(&mut grads, *a, Cow::Owned(ga));
                }
                Op::Reshape(a) => {
                    self.accumulate(&mut grads, *a, Cow::Owned(g));
                }
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (ga, _) = kernels::permute(&g, node.value.shape(), &inverse);
                    self.accumulate(&mut grads, *a, Cow::Owned(ga));
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = split_at_axis(node.value.shape(), *axis);
                    let mut gx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: T = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                gx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, Cow::Owned(gx));
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x).data();
                    let gx = g
                        .iter()
                        .zip(vx)
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    self.accumulate(&mut grads, *x, Cow::Owned(gx));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = *node.value.shape().last().unwrap();
                    let gam = self.value(*gamma).data();
                    if self.requires_grad(*gamma) {
                        let mut gg = vec![T::zero(); d];
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((acc, &gv), &hv) in gg.iter_mut().zip(grow).zip(hrow) {
                                *acc = *acc + gv * hv;
                            }
                        }
                        self.accumulate(&mut grads, *gamma, Cow::Owned(gg));
                    }
                    if self.requires_grad(*beta) {
                        let mut gb = vec![T::zero(); d];
                        for grow in g.chunks(d) {
                            add_into(&mut gb, grow);
                        }
                        self.accumulate(&mut grads, *beta, Cow::Owned(gb));
                    }
                    if self.requires_grad(*x) {
                        let nd = T::from_usize(d).unwrap();
                        let mut gx = vec![T::zero(); g.len()];
                        for (((gxr, grow), hrow), &r) in gx
                            .chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .zip(rstd.iter())
                        {
                            let dh: Vec<T> = grow.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                            let mean_dh = dh.iter().copied().sum::<T>() / nd;
                            let mean_dh_h =
                                dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / nd;
                            for ((o, &dhv), &hv) in gxr.iter_mut().zip(&dh).zip(hrow) {
                                *o = r * (dhv - mean_dh - hv * mean_dh_h);
                            }
                        }
                        self.accumulate(&mut grads, *x, Cow::Owned(gx));
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &v in inputs {
                        let len = self.shape(v)[*axis];
                        if self.requires_grad(v) {
                            let mut gv = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                gv.extend_from_slice(&g[start..start + len * inner]);
                            }
                            self.accumulate(&mut grads, v, Cow::Owned(gv));
                        }
                        offset += len;
                    }
                }
                Op::Select { x, axis, index } => {
                    let (outer, len, inner) = split_at_axis(self.shape(*x), *axis);
                    let mut gx = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        let start = (o * len + index) * inner;
                        gx[start..start + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                    self.accumulate(&mut grads, *x, Cow::Owned(gx));
                }
                Op::ExpandLeading(x) => {
                    let inner = self.value(*x).numel();
                    let mut gx = vec![T::zero(); inner];
                    for chunk in g.chunks(inner) {
                        add_into(&mut gx, chunk);
                    }
                    self.accumulate(&mut grads, *x, Cow::Owned(gx));
                }
                Op::Sum(x) => {
                    let gx = vec![g[0]; self.value(*x).numel()];
                    self.accumulate(&mut grads, *x, Cow::Owned(gx));
                }
                Op::Mean(x) => {
                    let len = self.value(*x).numel();
                    let gx = vec![g[0] / T::from_usize(len).unwrap(); len];
                    self.accumulate(&mut grads, *x, Cow::Owned(gx));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let k = self.shape(*logits)[1];
                    let scale = g[0] / T::from_usize(targets.len()).unwrap();
                    let mut gl = probs.clone();
                    for (row, &t) in gl.chunks_mut(k).zip(targets) {
                        row[t] = row[t] - T::one();
                        for v in row.iter_mut() {
                            *v = *v * scale;
                        }
                    }
                    self.accumulate(&mut grads, *logits, Cow::Owned(gl));
                }
                Op::Dropout { x, mask } => {
                    let gx = g.iter().zip(mask).map(|(&a, &b)| a * b).collect();
                    self.accumulate(&mut grads, *x, Cow::Owned(gx));
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, g: Cow<'_, [T]>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => add_into(existing, &g),
            slot @ None => *slot = Some(g.into_owned()),
        }
    }
}

pub(crate) fn softmax_forward<T: Scalar>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_at_axis(t.shape(), axis);
    let mut data = t.data().to_vec();
    if inner == 1 {
        parallel::for_each_row(&mut data, len, |_, row| softmax_row(row));
    } else {
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len)
                    .map(|i| data[idx(i)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..len {
                    let e = (data[idx(i)] - max).exp();
                    data[idx(i)] = e;
                    total = total + e;
                }
                for i in 0..len {
                    data[idx(i)] = data[idx(i)] / total;
                }
            }
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    cdf + x * pdf
}
