//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves created
//! with [`Tape::param`] receive gradients; leaves created with
//! [`Tape::constant`] and anything computed only from constants do not, so
//! frozen sub-networks cost nothing in the backward pass.

use std::borrow::Cow;

use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    /// Handle of the node at position `index` of its tape.
    pub fn from_index(index: usize) -> Self {
        Var(index)
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Attention(Box<AttentionCache<T>>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    MulConst(Var, Matrix<T>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix<T> },
    SquaredError(Var, T),
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: Vec<Matrix<T>>,
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph of a single forward pass.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Matrix<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf borrowing its value; `trainable` selects param vs. constant.
    pub fn leaf_ref(&mut self, value: &'a Matrix<T>, trainable: bool) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 x d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut value = self.value(x).clone();
        assert_eq!(value.cols(), r.cols(), "add_row width mismatch");
        for i in 0..value.rows() {
            for (o, &b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *o = *o + b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    /// Multiplies every row of `x` elementwise by a `1 x d` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        let mut value = self.value(x).clone();
        assert_eq!(value.cols(), r.cols(), "mul_row width mismatch");
        for i in 0..value.rows() {
            for (o, &g) in value.row_mut(i).iter_mut().zip(r.data()) {
                *o = *o * g;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Per-row standardization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let n = T::lit(cols as f64);
        let mut value = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::norm_eps()).sqrt();
            for (o, &v) in value.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(value, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Multi-head scaled dot-product attention. `q` is `Lq x d`, `k` and `v`
    /// are `Lk x d`; heads split `d` into contiguous column blocks. With
    /// `causal`, query `i` only sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols();
        assert!(heads >= 1 && d % heads == 0, "{heads} heads do not divide width {d}");
        assert_eq!(km.cols(), d);
        assert_eq!(vm.shape(), km.shape());
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (lq, lk) = (qm.rows(), km.rows());

        let mut out = Matrix::zeros(lq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let c0 = h * dh;
            let mut p = Matrix::zeros(lq, lk);
            for i in 0..lq {
                let qi = &qm.row(i)[c0..c0 + dh];
                let visible = if causal { (i + 1).min(lk) } else { lk };
                let row = p.row_mut(i);
                let mut max = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate().take(visible) {
                    *s = dot(qi, &km.row(j)[c0..c0 + dh]) * scale;
                    max = max.max(*s);
                }
                let mut total = T::zero();
                for s in row.iter_mut().take(visible) {
                    *s = (*s - max).exp();
                    total = total + *s;
                }
                for s in row.iter_mut().take(visible) {
                    *s = *s / total;
                }
            }
            for i in 0..lq {
                let o = &mut out.row_mut(i)[c0..c0 + dh];
                for j in 0..lk {
                    let w = p.get(i, j);
                    if w == T::zero() {
                        continue;
                    }
                    for (oc, &vc) in o.iter_mut().zip(&vm.row(j)[c0..c0 + dh]) {
                        *oc = *oc + w * vc;
                    }
                }
            }
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let cache = AttentionCache { q, k, v, heads, probs };
        self.push(out, Op::Attention(Box::new(cache)), rg)
    }

    /// Attention weights of head `h` recorded by an attention node.
    pub fn attention_probs(&self, node: Var, h: usize) -> Option<&Matrix<T>> {
        match &self.nodes[node.0].op {
            Op::Attention(cache) => cache.probs.get(h),
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(m.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let value = Matrix::row_vector(self.value(x).row(index).to_vec());
        let rg = self.rg(x);
        self.push(value, Op::Row(x, index), rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut value = m.sum_rows();
        value.scale_assign(T::one() / T::lit(m.rows() as f64));
        let rg = self.rg(x);
        self.push(value, Op::MeanRows(x), rg)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::from_vec(indices.len(), t.cols(), data);
        let rg = self.rg(table);
        self.push(value, Op::GatherRows(table, indices.to_vec()), rg)
    }

    /// Elementwise product with a fixed matrix (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Matrix<T>) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(value.shape(), mask.shape(), "mask shape mismatch");
        for (o, &m) in value.data_mut().iter_mut().zip(mask.data()) {
            *o = *o * m;
        }
        let rg = self.rg(x);
        self.push(value, Op::MulConst(x, mask), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per logit row");
        assert!(!targets.is_empty(), "cross entropy over zero targets");
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp();
                z = z + *p;
            }
            for p in probs.row_mut(r) {
                *p = *p / z;
            }
            total = total + (z.ln() + max - row[t]);
        }
        let loss = total / T::lit(targets.len() as f64);
        let rg = self.rg(logits);
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `(x - target)^2` for a 1x1 `x`.
    pub fn squared_error(&mut self, x: Var, target: T) -> Var {
        let d = self.value(x).item() - target;
        let rg = self.rg(x);
        self.push(Matrix::scalar(d * d), Op::SquaredError(x, target), rg)
    }

    /// Gradients of the 1x1 node `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Matrix::scalar(T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Matrix<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if self.rg(*row) {
                    acc(*row, g.sum_rows());
                }
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row);
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for i in 0..dx.rows() {
                        for (o, &s) in dx.row_mut(i).iter_mut().zip(r.data()) {
                            *o = *o * s;
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*row) {
                    let xv = self.value(*x);
                    let mut dr = Matrix::zeros(1, r.cols());
                    for i in 0..g.rows() {
                        for ((o, &gv), &xv) in dr.data_mut().iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                            *o = *o + gv * xv;
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (o, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *o = T::zero();
                    }
                }
                acc(*x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (o, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *o = *o * gelu_parts(v).1;
                }
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (o, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *o = *o * y * (T::one() - y);
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = T::lit(y.cols() as f64);
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = dot(gr, yr) / n;
                    for ((o, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*x, dx);
            }
            Op::Attention(cache) => {
                let (dq, dk, dv) = self.attention_backward(cache, g);
                acc(cache.q, dq);
                acc(cache.k, dk);
                acc(cache.v, dv);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        let cols = g.cols();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(p, Matrix::from_vec(rows, cols, slice));
                    }
                    offset += rows;
                }
            }
            Op::Row(x, index) => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Matrix::zeros(rows, cols);
                dx.row_mut(*index).copy_from_slice(g.data());
                acc(*x, dx);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.value(*x).shape();
                let inv = T::one() / T::lit(rows as f64);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for (o, &gv) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv * inv;
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows(table, indices) => {
                let (rows, cols) = self.value(*table).shape();
                let mut dt = Matrix::zeros(rows, cols);
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &gv) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + gv;
                    }
                }
                acc(*table, dt);
            }
            Op::MulConst(x, mask) => {
                let mut dx = g.clone();
                for (o, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                    *o = *o * m;
                }
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.item() / T::lit(targets.len() as f64);
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = dl.row_mut(r);
                    row[t] = row[t] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                acc(*logits, dl);
            }
            Op::SquaredError(x, target) => {
                let d = self.value(*x).item() - *target;
                acc(*x, Matrix::scalar(T::lit(2.0) * d * g.item()));
            }
        }
    }

    fn attention_backward(&self, cache: &AttentionCache<T>, g: &Matrix<T>) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let (qm, km, vm) = (self.value(cache.q), self.value(cache.k), self.value(cache.v));
        let d = qm.cols();
        let dh = d / cache.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (lq, lk) = (qm.rows(), km.rows());
        let mut dq = Matrix::zeros(lq, d);
        let mut dk = Matrix::zeros(lk, d);
        let mut dv = Matrix::zeros(lk, d);
        for (h, p) in cache.probs.iter().enumerate() {
            let c0 = h * dh;
            for i in 0..lq {
                let go = &g.row(i)[c0..c0 + dh];
                // dP_ij = dO_i · V_j ; dS = P ⊙ (dP - Σ_j P_ij dP_ij)
                let mut dp = vec![T::zero(); lk];
                let mut weighted = T::zero();
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let pij = p.get(i, j);
                    if pij == T::zero() {
                        continue;
                    }
                    *dpj = dot(go, &vm.row(j)[c0..c0 + dh]);
                    weighted = weighted + pij * *dpj;
                    for (o, &gv) in dv.row_mut(j)[c0..c0 + dh].iter_mut().zip(go) {
                        *o = *o + pij * gv;
                    }
                }
                for (j, &dpj) in dp.iter().enumerate() {
                    let pij = p.get(i, j);
                    if pij == T::zero() {
                        continue;
                    }
                    let ds = pij * (dpj - weighted) * scale;
                    let kj = &km.row(j)[c0..c0 + dh];
                    for (o, &kv) in dq.row_mut(i)[c0..c0 + dh].iter_mut().zip(kj) {
                        *o = *o + ds * kv;
                    }
                    let qi = &qm.row(i)[c0..c0 + dh];
                    for (o, &qv) in dk.row_mut(j)[c0..c0 + dh].iter_mut().zip(qi) {
                        *o = *o + ds * qv;
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `(gelu(x), gelu'(x))` for the tanh approximation.
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Matrix<f64>) -> f64, x: &Matrix<f64>) -> Matrix<f64> {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    fn sample(rows: usize, cols: usize, salt: f64) -> Matrix<f64> {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| ((i as f64 + salt) * 1.37).sin()).collect(),
        )
    }

    #[test]
    fn attention_layer_norm_chain_matches_finite_differences() {
        let x0 = sample(4, 6, 0.3);
        let wk = sample(6, 6, 1.1);
        let f = |x: &Matrix<f64>| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let w = t.constant(wk.clone());
            let n = t.layer_norm(xv);
            let k = t.matmul(n, w);
            let a = t.attention(n, k, n, 2, true);
            let g = t.gelu(a);
            let m = t.mean_rows(g);
            let s = t.sigmoid(m);
            let p = t.row(s, 0);
            let w2 = t.constant(Matrix::from_vec(6, 1, vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.7]));
            let o = t.matmul(p, w2);
            let l = t.squared_error(o, 0.3);
            t.value(l).item()
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let w = t.constant(wk.clone());
        let n = t.layer_norm(xv);
        let k = t.matmul(n, w);
        let a = t.attention(n, k, n, 2, true);
        let g = t.gelu(a);
        let m = t.mean_rows(g);
        let s = t.sigmoid(m);
        let p = t.row(s, 0);
        let w2 = t.constant(Matrix::from_vec(6, 1, vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.7]));
        let o = t.matmul(p, w2);
        let l = t.squared_error(o, 0.3);
        let grads = t.backward(l);
        assert_close(grads.get(xv).unwrap(), &numeric_grad(f, &x0), 1e-5);
    }

    #[test]
    fn cross_entropy_gather_concat_matches_finite_differences() {
        let table0 = sample(5, 3, 0.7);
        let f = |tb: &Matrix<f64>| {
            let mut t = Tape::new();
            let tv = t.constant(tb.clone());
            let a = t.gather_rows(tv, &[1, 3, 1]);
            let b = t.row(tv, 4);
            let c = t.concat_rows(&[b, a]);
            let r = t.constant(Matrix::row_vector(vec![0.2, -0.4, 1.5]));
            let c = t.mul_row(c, r);
            let c = t.add_row(c, r);
            let c = t.relu(c);
            let c = t.mul_const(c, Matrix::filled(4, 3, 2.0));
            let l = t.cross_entropy(c, &[0, 2, 1, 1]);
            t.value(l).item()
        };
        let mut t = Tape::new();
        let tv = t.param(table0.clone());
        let a = t.gather_rows(tv, &[1, 3, 1]);
        let b = t.row(tv, 4);
        let c = t.concat_rows(&[b, a]);
        let r = t.constant(Matrix::row_vector(vec![0.2, -0.4, 1.5]));
        let c = t.mul_row(c, r);
        let c = t.add_row(c, r);
        let c = t.relu(c);
        let c = t.mul_const(c, Matrix::filled(4, 3, 2.0));
        let l = t.cross_entropy(c, &[0, 2, 1, 1]);
        let grads = t.backward(l);
        assert_close(grads.get(tv).unwrap(), &numeric_grad(f, &table0), 1e-5);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Matrix::scalar(2.0));
        let p = t.param(Matrix::scalar(3.0));
        let y = t.matmul(c, p);
        let l = t.squared_error(y, 0.0);
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().item(), 2.0 * 6.0 * 2.0);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(sample(7, 16, 2.0).map(|v| 3.0 * v + 1.0));
        let y = t.layer_norm(x);
        let y = t.value(y);
        for r in 0..y.rows() {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "{mean} {var}");
        }
    }
}
