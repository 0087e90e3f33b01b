//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Values
//! are materialised eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for parameters and for inputs created with
//! [`Graph::input_grad`]. Parameter values are read in place from the
//! [`ParamStore`] the graph borrows, so building a graph never copies weights.

use std::collections::HashMap;

use super::optim::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm_slices, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SelectRows { a: Var, rows: Vec<usize> },
    Reshape(Var),
    SoftmaxRows(Var),
    GroupAdd { big: Var, small: Var, group: usize },
    GroupWeightedSum { weights: Var, values: Var },
    Attention(Box<AttentionCache<T>>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor<T> },
    L2NormalizeRows { a: Var, norms: Vec<T> },
    SumAll(Var),
    HardestNegativeHinge { sim: Var, active: Vec<(usize, usize, usize)> },
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    tq: usize,
    tk: usize,
    scale: T,
    probs: Vec<T>,
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Masking options for [`Graph::attention`].
#[derive(Clone, Debug, Default)]
pub struct AttentionMask {
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
    /// Number of valid keys per batch item; keys beyond are ignored.
    pub key_lens: Option<Vec<usize>>,
}

pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of a backward pass.
pub struct Backward<T> {
    pub params: Gradients<T>,
    inputs: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Backward<T> {
    /// Gradient with respect to an input created by [`Graph::input_grad`].
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v.0)
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

fn softmax_in_place<T: Real>(row: &mut [T], valid: usize) {
    let mut max = T::neg_infinity();
    for &v in &row[..valid] {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row[..valid].iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row[..valid].iter_mut() {
        *v = *v / sum;
    }
    for v in row[valid..].iter_mut() {
        *v = T::zero();
    }
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value on tape");
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// An input whose gradient is reported by [`Backward::input`].
    pub fn input_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = Tensor::matmul(self.value(a), ta, self.value(b), tb)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `x . w + b` with `b` a `[1, n]` row.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let w = self.param(w);
        let y = self.matmul(x, w);
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_row(y, b)
            }
            None => y,
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let n = va.cols();
        assert_eq!(vr.len(), n, "row broadcast width");
        let mut out = va.clone();
        let r = vr.data();
        for chunk in out.data_mut().chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(r) {
                *x = if mul { *x * y } else { *x + y };
            }
        }
        let ng = self.ng(a) || self.ng(row);
        let op = if mul {
            Op::MulRow(a, row)
        } else {
            Op::AddRow(a, row)
        };
        self.push(out, op, ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, false)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, true)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(v.row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::matrix(rows, total, data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::matrix(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start <= end && end <= va.cols(), "slice_cols bounds");
        let rows = va.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(
            Tensor::matrix(rows, end - start, data),
            Op::SliceCols { a, start },
            ng,
        )
    }

    /// Gather rows (embedding lookup when `a` is a table).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert!(r < va.rows(), "select_rows index {r} >= {}", va.rows());
            data.extend_from_slice(va.row(r));
        }
        let ng = self.ng(a);
        self.push(
            Tensor::matrix(rows.len(), cols, data),
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshaped(&[rows, cols])
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row, n);
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// `big[b * group + r] + small[b]` for a `[B * group, n]` and `[B, n]` pair.
    pub fn group_add(&mut self, big: Var, small: Var, group: usize) -> Var {
        let (vb, vs) = (self.value(big), self.value(small));
        assert_eq!(vb.rows(), vs.rows() * group, "group_add rows");
        assert_eq!(vb.cols(), vs.cols(), "group_add cols");
        let n = vb.cols();
        let mut out = vb.clone();
        for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
            for (x, &y) in row.iter_mut().zip(vs.row(i / group)) {
                *x = *x + y;
            }
        }
        let ng = self.ng(big) || self.ng(small);
        self.push(out, Op::GroupAdd { big, small, group }, ng)
    }

    /// `out[b] = sum_r weights[b, r] * values[b * R + r]`.
    pub fn group_weighted_sum(&mut self, weights: Var, values: Var) -> Var {
        let (vw, vv) = (self.value(weights), self.value(values));
        let (b, r) = (vw.rows(), vw.cols());
        assert_eq!(vv.rows(), b * r, "group_weighted_sum rows");
        let d = vv.cols();
        let mut out = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            let w = vw.row(bi);
            let o = out.row_mut(bi);
            for (ri, &wr) in w.iter().enumerate() {
                for (x, &y) in o.iter_mut().zip(vv.row(bi * r + ri)) {
                    *x = *x + wr * y;
                }
            }
        }
        let ng = self.ng(weights) || self.ng(values);
        self.push(out, Op::GroupWeightedSum { weights, values }, ng)
    }

    /// Scaled dot-product attention for `batch` independent groups.
    ///
    /// `q` is `[batch * tq, d]`, `k` is `[batch * tk, d]`, `v` is
    /// `[batch * tk, dv]`; output is `[batch * tq, dv]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        mask: &AttentionMask,
    ) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let tq = vq.rows() / batch;
        let tk = vk.rows() / batch;
        assert_eq!(tq * batch, vq.rows());
        assert_eq!(tk * batch, vk.rows());
        assert_eq!(vv.rows(), vk.rows());
        let d = vq.cols();
        assert_eq!(vk.cols(), d);
        let dv = vv.cols();
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut probs = vec![T::zero(); batch * tq * tk];
        let mut out = Tensor::zeros(&[batch * tq, dv]);
        for b in 0..batch {
            let qs = &vq.data()[b * tq * d..(b + 1) * tq * d];
            let ks = &vk.data()[b * tk * d..(b + 1) * tk * d];
            let ps = &mut probs[b * tq * tk..(b + 1) * tq * tk];
            gemm_slices(tq, d, tk, scale, qs, false, ks, true, T::zero(), ps);
            let klen = mask.key_lens.as_ref().map_or(tk, |l| l[b].min(tk));
            for i in 0..tq {
                let valid = if mask.causal { klen.min(i + 1) } else { klen };
                assert!(valid > 0, "attention row with no visible keys");
                softmax_in_place(&mut ps[i * tk..(i + 1) * tk], valid);
            }
            let vs = &vv.data()[b * tk * dv..(b + 1) * tk * dv];
            let os = &mut out.data_mut()[b * tq * dv..(b + 1) * tq * dv];
            gemm_slices(tq, tk, dv, T::one(), ps, false, vs, false, T::zero(), os);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                batch,
                tq,
                tk,
                scale,
                probs,
            })),
            ng,
        )
    }

    /// Row-wise layer normalisation followed by `gain` and `bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let gain = self.param(gain);
        let bias = self.param(bias);
        let vx = self.value(x);
        let n = vx.cols();
        let eps = T::lit(1e-5);
        let nt = T::lit(n as f64);
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows());
        for row in xhat.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain).data().to_vec();
        let bb = self.value(bias).data().to_vec();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(n) {
            for ((v, &gi), &bi) in row.iter_mut().zip(&g).zip(&bb) {
                *v = *v * gi + bi;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax.
    /// Rows whose target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), targets.len(), "cross_entropy rows");
        let n = vl.cols();
        let mut probs = vl.clone();
        let mut loss = T::zero();
        for (row, (raw, t)) in probs
            .data_mut()
            .chunks_mut(n)
            .zip(vl.data().chunks(n).zip(targets))
        {
            if let Some(t) = *t {
                assert!(t < n, "target {t} out of range {n}");
                let max = raw.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = raw.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                loss = loss + lse - raw[t];
            }
            softmax_in_place(row, n);
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        let tiny = T::lit(1e-12);
        for row in out.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormalizeRows { a, norms }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Bidirectional max-margin ranking loss with hardest in-batch negatives.
    ///
    /// `sim[i, j]` scores image `i` against sentence `j`; the diagonal holds
    /// matched pairs. `allowed(i, j)` decides whether `(i, j)` may serve as a
    /// negative (it is never consulted for `i == j`).
    pub fn hardest_negative_hinge(
        &mut self,
        sim: Var,
        margin: T,
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Var {
        let vs = self.value(sim);
        let n = vs.rows();
        assert_eq!(vs.cols(), n, "similarity matrix must be square");
        let mut loss = T::zero();
        // (row, col, positive) triples of active hinges; positive is the diagonal index
        let mut active = Vec::new();
        for i in 0..n {
            let pos = vs.get(i, i);
            // hardest sentence for image i
            let mut best: Option<(usize, T)> = None;
            for j in 0..n {
                if j != i && allowed(i, j) {
                    let s = vs.get(i, j);
                    if best.map_or(true, |(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
            }
            if let Some((j, s)) = best {
                let h = margin - pos + s;
                if h > T::zero() {
                    loss = loss + h;
                    active.push((i, j, i));
                }
            }
            // hardest image for sentence i
            let mut best: Option<(usize, T)> = None;
            for j in 0..n {
                if j != i && allowed(j, i) {
                    let s = vs.get(j, i);
                    if best.map_or(true, |(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
            }
            if let Some((j, s)) = best {
                let h = margin - pos + s;
                if h > T::zero() {
                    loss = loss + h;
                    active.push((j, i, i));
                }
            }
        }
        let ng = self.ng(sim);
        self.push(
            Tensor::scalar(loss),
            Op::HardestNegativeHinge { sim, active },
            ng,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Backward<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut params = Gradients::empty(self.store.len());
        let mut inputs = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    inputs.insert(idx, g);
                }
                Op::Param(id) => params.accumulate(*id, &g),
                op => self.propagate(idx, op, g, &mut grads),
            }
        }
        Backward { params, inputs }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.nodes[v.0].needs_grad {
            self.acc(grads, v, f());
        }
    }

    fn propagate(&self, idx: usize, op: &Op<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = self.nodes[idx].value.as_ref().expect("computed node");
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || {
                    if *ta {
                        Tensor::matmul(vb, *tb, &g, true).unwrap()
                    } else {
                        Tensor::matmul(&g, false, vb, !*tb).unwrap()
                    }
                });
                self.acc_with(grads, *b, || {
                    if *tb {
                        Tensor::matmul(&g, true, va, *ta).unwrap()
                    } else {
                        Tensor::matmul(va, !*ta, &g, false).unwrap()
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *b, || g.map(|x| -x));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || zip(&g, vb, |x, y| x * y));
                self.acc_with(grads, *b, || zip(&g, va, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                self.acc_with(grads, *row, || column_sums(&g));
                self.acc(grads, *a, g);
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                self.acc_with(grads, *row, || column_sums(&zip(&g, va, |x, y| x * y)));
                self.acc_with(grads, *a, || {
                    let n = g.cols();
                    let mut d = g.clone();
                    for chunk in d.data_mut().chunks_mut(n) {
                        for (x, &y) in chunk.iter_mut().zip(vr.data()) {
                            *x = *x * y;
                        }
                    }
                    d
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc_with(grads, *a, || g.map(|x| x * c));
            }
            Op::Tanh(a) => {
                self.acc_with(grads, *a, || zip(&g, out, |x, y| x * (T::one() - y * y)));
            }
            Op::Sigmoid(a) => {
                self.acc_with(grads, *a, || zip(&g, out, |x, y| x * y * (T::one() - y)));
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                self.acc_with(grads, *a, || zip(&g, va, |x, y| x * gelu_grad(y)));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.acc(grads, p, Tensor::matrix(rows, w, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.nodes[p.0].needs_grad {
                        let d = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        self.acc(grads, p, Tensor::matrix(r, cols, d));
                    }
                    offset += r;
                }
            }
            Op::SliceCols { a, start } => {
                let va = self.value(*a);
                let w = g.cols();
                self.acc_with(grads, *a, || {
                    let mut d = Tensor::zeros(&[va.rows(), va.cols()]);
                    for r in 0..va.rows() {
                        d.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    d
                });
            }
            Op::SelectRows { a, rows } => {
                let va = self.value(*a);
                self.acc_with(grads, *a, || {
                    let mut d = Tensor::zeros(&[va.rows(), va.cols()]);
                    for (i, &r) in rows.iter().enumerate() {
                        for (x, &y) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *x = *x + y;
                        }
                    }
                    d
                });
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc_with(grads, *a, || g.reshaped(&shape).unwrap());
            }
            Op::SoftmaxRows(a) => {
                self.acc_with(grads, *a, || softmax_backward(out, &g));
            }
            Op::GroupAdd { big, small, group } => {
                let group = *group;
                self.acc_with(grads, *small, || {
                    let n = g.cols();
                    let b = g.rows() / group;
                    let mut d = Tensor::zeros(&[b, n]);
                    for (i, row) in g.data().chunks(n).enumerate() {
                        for (x, &y) in d.row_mut(i / group).iter_mut().zip(row) {
                            *x = *x + y;
                        }
                    }
                    d
                });
                self.acc(grads, *big, g);
            }
            Op::GroupWeightedSum { weights, values } => {
                let (vw, vv) = (self.value(*weights), self.value(*values));
                let (b, r) = (vw.rows(), vw.cols());
                self.acc_with(grads, *weights, || {
                    let mut d = Tensor::zeros(&[b, r]);
                    for bi in 0..b {
                        for ri in 0..r {
                            let dot: T = g
                                .row(bi)
                                .iter()
                                .zip(vv.row(bi * r + ri))
                                .map(|(&x, &y)| x * y)
                                .sum();
                            d.row_mut(bi)[ri] = dot;
                        }
                    }
                    d
                });
                self.acc_with(grads, *values, || {
                    let mut d = Tensor::zeros(&[vv.rows(), vv.cols()]);
                    for bi in 0..b {
                        for ri in 0..r {
                            let w = vw.get(bi, ri);
                            for (x, &y) in d.row_mut(bi * r + ri).iter_mut().zip(g.row(bi)) {
                                *x = w * y;
                            }
                        }
                    }
                    d
                });
            }
            Op::Attention(c) => self.attention_backward(c, &g, grads),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gv = self.value(*gain).data().to_vec();
                self.acc_with(grads, *gain, || column_sums(&zip(&g, xhat, |a, b| a * b)));
                self.acc_with(grads, *bias, || column_sums(&g));
                self.acc_with(grads, *x, || {
                    let nt = T::lit(n as f64);
                    let mut d = Tensor::zeros(&[g.rows(), n]);
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<T> = gr.iter().zip(&gv).map(|(&a, &b)| a * b).collect();
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let is = inv_std[r];
                        for (i, v) in d.row_mut(r).iter_mut().enumerate() {
                            *v = is / nt * (nt * dxhat[i] - s1 - xr[i] * s2);
                        }
                    }
                    d
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0];
                self.acc_with(grads, *logits, || {
                    let n = probs.cols();
                    let mut d = probs.clone();
                    for (row, t) in d.data_mut().chunks_mut(n).zip(targets) {
                        match t {
                            Some(t) => {
                                row[*t] = row[*t] - T::one();
                                for v in row.iter_mut() {
                                    *v = *v * scale;
                                }
                            }
                            None => row.fill(T::zero()),
                        }
                    }
                    d
                });
            }
            Op::L2NormalizeRows { a, norms } => {
                self.acc_with(grads, *a, || {
                    let n = g.cols();
                    let mut d = Tensor::zeros(&[g.rows(), n]);
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (i, v) in d.row_mut(r).iter_mut().enumerate() {
                            *v = (gr[i] - y[i] * dot) / norms[r];
                        }
                    }
                    d
                });
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                let s = g.data()[0];
                self.acc_with(grads, *a, || Tensor::filled(va.shape(), s));
            }
            Op::HardestNegativeHinge { sim, active } => {
                let vs = self.value(*sim);
                let s = g.data()[0];
                self.acc_with(grads, *sim, || {
                    let mut d = Tensor::zeros(&[vs.rows(), vs.cols()]);
                    let n = vs.cols();
                    for &(r, c, p) in active {
                        d.data_mut()[r * n + c] = d.data()[r * n + c] + s;
                        d.data_mut()[p * n + p] = d.data()[p * n + p] - s;
                    }
                    d
                });
            }
        }
    }

    fn attention_backward(
        &self,
        c: &AttentionCache<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vq, vk, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (batch, tq, tk) = (c.batch, c.tq, c.tk);
        let d = vq.cols();
        let dv = vv.cols();
        let mut dq = Tensor::zeros(&[vq.rows(), d]);
        let mut dk = Tensor::zeros(&[vk.rows(), d]);
        let mut dvv = Tensor::zeros(&[vv.rows(), dv]);
        let mut dp = vec![T::zero(); tq * tk];
        for b in 0..batch {
            let ps = &c.probs[b * tq * tk..(b + 1) * tq * tk];
            let gs = &g.data()[b * tq * dv..(b + 1) * tq * dv];
            let vs = &vv.data()[b * tk * dv..(b + 1) * tk * dv];
            // dV = P^T dO
            gemm_slices(
                tk,
                tq,
                dv,
                T::one(),
                ps,
                true,
                gs,
                false,
                T::zero(),
                &mut dvv.data_mut()[b * tk * dv..(b + 1) * tk * dv],
            );
            // dP = dO V^T
            gemm_slices(tq, dv, tk, T::one(), gs, false, vs, true, T::zero(), &mut dp);
            // dS = P * (dP - rowsum(dP * P))
            for i in 0..tq {
                let p = &ps[i * tk..(i + 1) * tk];
                let row = &mut dp[i * tk..(i + 1) * tk];
                let dot: T = p.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pi) in row.iter_mut().zip(p) {
                    *x = pi * (*x - dot);
                }
            }
            let qs = &vq.data()[b * tq * d..(b + 1) * tq * d];
            let ks = &vk.data()[b * tk * d..(b + 1) * tk * d];
            gemm_slices(
                tq,
                tk,
                d,
                c.scale,
                &dp,
                false,
                ks,
                false,
                T::zero(),
                &mut dq.data_mut()[b * tq * d..(b + 1) * tq * d],
            );
            gemm_slices(
                tk,
                tq,
                d,
                c.scale,
                &dp,
                true,
                qs,
                false,
                T::zero(),
                &mut dk.data_mut()[b * tk * d..(b + 1) * tk * d],
            );
        }
        self.acc(grads, c.q, dq);
        self.acc(grads, c.k, dk);
        self.acc(grads, c.v, dvv);
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let n = g.cols();
    let mut d = vec![T::zero(); n];
    for row in g.data().chunks(n) {
        for (x, &y) in d.iter_mut().zip(row) {
            *x = *x + y;
        }
    }
    Tensor::matrix(1, n, d)
}

fn softmax_backward<T: Real>(p: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = p.cols();
    let mut d = g.clone();
    for (row, prow) in d.data_mut().chunks_mut(n).zip(p.data().chunks(n)) {
        let dot: T = row.iter().zip(prow).map(|(&a, &b)| a * b).sum();
        for (x, &pi) in row.iter_mut().zip(prow) {
            *x = pi * (*x - dot);
        }
    }
    d
}
