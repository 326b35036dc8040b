//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node in
//! topological order. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into leaf nodes; [`Graph::export_param_grads`]
//! moves the parameter-leaf gradients into their [`ParamStore`].

use std::collections::HashMap;

use super::dense::Tensor;
use super::params::{ParamId, ParamStore};
use super::real::{gemm, MatMut, MatView, Real};
use super::rng::Rng;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu { x: Var, tanh: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, outer: usize, axis_len: usize, inner: usize },
    Attention { q: Var, k: Var, v: Var, seq_len: usize, heads: usize, probs: Vec<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SegmentMean { x: Var, group: usize },
    Reshape(Var),
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    BceWithLogits { logits: Var, labels: Vec<T> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
    param_leaves: Vec<(ParamId, Var)>,
    param_cache: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape { op, left: a.to_vec(), right: b.to_vec() }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaf_grads: HashMap::new(), param_leaves: Vec::new(), param_cache: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    /// Constant input or trainable leaf.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Leaf bound to a registered parameter. Repeated calls with the same id
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).value.clone(), true);
        self.param_cache.insert(id, v);
        self.param_leaves.push((id, v));
        v
    }

    /// Adds the gradients of all parameter leaves into the store.
    pub fn export_param_grads(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.param_leaves {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                for (dst, &src) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatView::dense(self.value(a).data(), 0, m, k),
            MatView::dense(self.value(b).data(), 0, k, n),
            T::zero(),
            MatMut::dense(&mut out, 0, m, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x + bias` where bias broadcasts over every row of the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let bs = self.value(bias);
        if bs.numel() != xs.last_dim() {
            return Err(shape_err("add_bias", xs.shape(), bs.shape()));
        }
        let n = bs.numel();
        let mut out = xs.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, &b) in row.iter_mut().zip(bs.data()) {
                *o += b;
            }
        }
        let shape = xs.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias(x, bias), rg))
    }

    /// `x W + b` for `x: [m, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(x);
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i] * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let v = self.value(x);
        let tanh: Vec<T> = v.data().iter().map(|&z| fast_tanh(c * (z + a * z * z * z))).collect();
        let out = Tensor::from_fn(v.shape(), |i| half * v.data()[i] * (T::one() + tanh[i]));
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x, tanh }, rg)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(shape_err("layer_norm", xv.shape(), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.outer();
        let nn = T::of(n as f64);
        let eps = T::of(eps);
        let mut out = vec![T::zero(); xv.numel()];
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<T>() / nn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Softmax along `axis`, stabilized by subtracting the max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index { op: "softmax axis", index: axis, bound: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); xv.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..axis_len {
                    mx = mx.max(xv.data()[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..axis_len {
                    let e = (xv.data()[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..axis_len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, outer, axis_len, inner }, rg))
    }

    /// Multi-head scaled dot-product self-attention over independent
    /// sequences. `q`, `k`, `v` are `[S * seq_len, d]` with each sequence
    /// stored contiguously; head `j` uses columns `j*d/h .. (j+1)*d/h`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(shape_err("attention", &shape, self.shape(k)));
        }
        let (rows, d) = (shape[0], shape[1]);
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention: {rows} rows not divisible into sequences of {seq_len}, or d={d} not divisible by {heads} heads"
            )));
        }
        let seqs = rows / seq_len;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let n = seq_len;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); seqs * heads * n * n];
        let mut out = vec![T::zero(); rows * d];
        for s in 0..seqs {
            for h in 0..heads {
                let base = s * n * d + h * dh;
                let p_off = (s * heads + h) * n * n;
                gemm(
                    scale,
                    MatView::strided(qd, base, n, dh, d),
                    MatView::strided(kd, base, n, dh, d).t(),
                    T::zero(),
                    MatMut::dense(&mut probs, p_off, n, n),
                );
                for row in probs[p_off..p_off + n * n].chunks_mut(n) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for p in row.iter_mut() {
                        *p = (*p - mx).exp();
                        sum += *p;
                    }
                    for p in row.iter_mut() {
                        *p /= sum;
                    }
                }
                gemm(
                    T::one(),
                    MatView::dense(&probs, p_off, n, n),
                    MatView::strided(vd, base, n, dh, d),
                    T::zero(),
                    MatMut::strided(&mut out, base, n, dh, d),
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor::new(&[rows, d], out)?, Op::Attention { q, k, v, seq_len, heads, probs }, rg))
    }

    /// Selects rows (over the last axis) by index; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        let rows = xv.outer();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index { op: "gather_rows", index: i, bound: rows });
            }
            out.extend_from_slice(&xv.data()[i * w..(i + 1) * w]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[idx.len(), w], out)?, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Token embedding lookup: rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.last_dim() != vb.last_dim() {
            return Err(shape_err("concat_rows", va.shape(), vb.shape()));
        }
        let w = va.last_dim();
        let mut out = va.data().to_vec();
        out.extend_from_slice(vb.data());
        let rows = va.outer() + vb.outer();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[rows, w], out)?, Op::ConcatRows(a, b), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.outer() != vb.outer() {
            return Err(shape_err("concat_cols", va.shape(), vb.shape()));
        }
        let (wa, wb, rows) = (va.last_dim(), vb.last_dim(), va.outer());
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&va.data()[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&vb.data()[r * wb..(r + 1) * wb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[rows, wa + wb], out)?, Op::ConcatCols(a, b), rg))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, w) = (xv.outer(), xv.last_dim());
        if group == 0 || rows % group != 0 {
            return Err(Error::config(format!("segment_mean: {rows} rows not divisible by group {group}")));
        }
        let segs = rows / group;
        let inv = T::one() / T::of(group as f64);
        let mut out = vec![T::zero(); segs * w];
        for s in 0..segs {
            for r in 0..group {
                let src = &xv.data()[(s * group + r) * w..(s * group + r + 1) * w];
                for (o, &z) in out[s * w..(s + 1) * w].iter_mut().zip(src) {
                    *o += z;
                }
            }
            for o in &mut out[s * w..(s + 1) * w] {
                *o *= inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[segs, w], out)?, Op::SegmentMean { x, group }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Inverted dropout. Identity when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel()).map(|_| if rng.bernoulli(p) { T::zero() } else { keep }).collect();
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * mask[i]);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        let rows = lv.outer();
        if lv.shape().len() != 2 || rows != targets.len() {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if rows == 0 {
            return Err(Error::config("cross_entropy over zero rows"));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Index { op: "cross_entropy", index: t, bound: vocab });
            }
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &z) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (z - mx).exp();
                sum += *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= sum;
            }
            total += (mx + sum.ln() - row[t]).as_f64();
        }
        let loss = T::of(total / rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape_err("mse", pv.shape(), target.shape()));
        }
        let n = pv.numel().max(1);
        let total: f64 = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).as_f64().powi(2)).sum();
        let rg = self.rg(pred);
        let op = Op::Mse { pred, target: target.data().to_vec() };
        Ok(self.push(Tensor::scalar(T::of(total / n as f64)), op, rg))
    }

    /// Mean logistic loss of raw logits against {0, 1} labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != labels.len() || labels.is_empty() {
            return Err(shape_err("bce_with_logits", lv.shape(), &[labels.len()]));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                let z = z.as_f64();
                // softplus(z) - y z, written stably.
                z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
            })
            .sum();
        let rg = self.rg(logits);
        let labels = labels.iter().map(|&y| T::of(y)).collect();
        Ok(self.push(Tensor::scalar(T::of(total / lv.numel() as f64)), Op::BceWithLogits { logits, labels }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel().max(1) as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let acc = self.leaf_grads.entry(i).or_insert_with(|| vec![T::zero(); g.len()]);
                for (a, &b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(
                        T::one(),
                        MatView::dense(g, 0, m, n),
                        MatView::dense(vb.data(), 0, k, n).t(),
                        T::one(),
                        MatMut::dense(da, 0, m, k),
                    );
                }
                if self.rg(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm(
                        T::one(),
                        MatView::dense(va.data(), 0, m, k).t(),
                        MatView::dense(g, 0, m, n),
                        T::one(),
                        MatMut::dense(db, 0, k, n),
                    );
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.rg(*b) {
                    let n = self.value(*b).numel();
                    let db = slot(grads, *b, n);
                    for row in g.chunks(n.max(1)) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.rg(*p) {
                        add_into(slot(grads, *p, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let vb = self.value(*b).data();
                    let da = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * vb[j];
                    }
                }
                if self.rg(*b) {
                    let va = self.value(*a).data();
                    let db = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * va[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                let dx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * *s;
                }
            }
            Op::Gelu { x, tanh } => {
                let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three = T::of(3.0);
                let xv = self.value(*x).data();
                let dx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    let z = xv[j];
                    let t = tanh[j];
                    let d = half * (T::one() + t) + half * z * (T::one() - t * t) * c * (T::one() + three * a * z * z);
                    dx[j] += g[j] * d;
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let rows = rstd.len();
                let nn = T::of(n as f64);
                if self.rg(*x) {
                    let dx = slot(grads, *x, rows * n);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= nn;
                        m2 /= nn;
                        for j in 0..n {
                            dx[r * n + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if self.rg(*gain) {
                    let dg = slot(grads, *gain, n);
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let db = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Softmax { x, outer, axis_len, inner } => {
                let y = node.value.data();
                let dx = slot(grads, *x, y.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * axis_len + j) * inner + i;
                        let dot: T = (0..*axis_len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*axis_len {
                            dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, seq_len, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *seq_len, *heads, probs, grads);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let w = xv.last_dim();
                let dx = slot(grads, *x, xv.numel());
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut dx[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                if self.rg(*a) {
                    add_into(slot(grads, *a, na), &g[..na]);
                }
                if self.rg(*b) {
                    add_into(slot(grads, *b, g.len() - na), &g[na..]);
                }
            }
            Op::ConcatCols(a, b) => {
                let (wa, wb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let rows = self.value(*a).outer();
                if self.rg(*a) {
                    let da = slot(grads, *a, rows * wa);
                    for r in 0..rows {
                        add_into(&mut da[r * wa..(r + 1) * wa], &g[r * (wa + wb)..r * (wa + wb) + wa]);
                    }
                }
                if self.rg(*b) {
                    let db = slot(grads, *b, rows * wb);
                    for r in 0..rows {
                        add_into(&mut db[r * wb..(r + 1) * wb], &g[r * (wa + wb) + wa..(r + 1) * (wa + wb)]);
                    }
                }
            }
            Op::SegmentMean { x, group } => {
                let xv = self.value(*x);
                let w = xv.last_dim();
                let inv = T::one() / T::of(*group as f64);
                let dx = slot(grads, *x, xv.numel());
                for r in 0..xv.outer() {
                    let s = r / group;
                    for j in 0..w {
                        dx[r * w + j] += g[s * w + j] * inv;
                    }
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::Dropout { x, mask } => {
                let dx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * mask[j];
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / T::of(targets.len() as f64);
                let dl = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..vocab {
                        let ind = if j == t { T::one() } else { T::zero() };
                        dl[r * vocab + j] += scale * (probs[r * vocab + j] - ind);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = g[0] * T::of(2.0 / pv.len().max(1) as f64);
                let dp = slot(grads, *pred, pv.len());
                for j in 0..pv.len() {
                    dp[j] += scale * (pv[j] - target[j]);
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let lv = self.value(*logits).data();
                let scale = g[0] / T::of(lv.len() as f64);
                let dl = slot(grads, *logits, lv.len());
                for j in 0..lv.len() {
                    let sig = T::one() / (T::one() + (-lv[j]).exp());
                    dl[j] += scale * (sig - labels[j]);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let dx = slot(grads, *x, n);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let s = g[0] / T::of(n.max(1) as f64);
                let dx = slot(grads, *x, n);
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        n: usize,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, d) = (self.shape(q)[0], self.shape(q)[1]);
        let seqs = rows / n;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); n * n];
        for s in 0..seqs {
            for h in 0..heads {
                let base = s * n * d + h * dh;
                let p = &probs[(s * heads + h) * n * n..(s * heads + h + 1) * n * n];
                // dV = P^T dO
                gemm(
                    T::one(),
                    MatView::dense(p, 0, n, n).t(),
                    MatView::strided(g, base, n, dh, d),
                    T::zero(),
                    MatMut::strided(&mut dv, base, n, dh, d),
                );
                // dP = dO V^T
                gemm(
                    T::one(),
                    MatView::strided(g, base, n, dh, d),
                    MatView::strided(vd, base, n, dh, d).t(),
                    T::zero(),
                    MatMut::dense(&mut dp, 0, n, n),
                );
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
                for r in 0..n {
                    let row_p = &p[r * n..(r + 1) * n];
                    let row_dp = &mut dp[r * n..(r + 1) * n];
                    let dot: T = row_p.iter().zip(row_dp.iter()).map(|(&a, &b)| a * b).sum();
                    for (x, &pp) in row_dp.iter_mut().zip(row_p) {
                        *x = pp * (*x - dot) * scale;
                    }
                }
                gemm(
                    T::one(),
                    MatView::dense(&dp, 0, n, n),
                    MatView::strided(kd, base, n, dh, d),
                    T::zero(),
                    MatMut::strided(&mut dq, base, n, dh, d),
                );
                gemm(
                    T::one(),
                    MatView::dense(&dp, 0, n, n).t(),
                    MatView::strided(qd, base, n, dh, d),
                    T::zero(),
                    MatMut::strided(&mut dk, base, n, dh, d),
                );
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(var) {
                add_into(slot(grads, var, rows * d), &local);
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `tanh` through one `exp`; libm's `tanh` is several times slower and
/// GELU calls it once per activation.
fn fast_tanh<T: Real>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / (T::one() + (two * u).exp())
}
