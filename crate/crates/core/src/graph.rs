//! A small tensor-level reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Parameter
//! leaves borrow their values from a [`ParamStore`] instead of copying them.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, strides, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * pdf
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which keys each query may attend to.
#[derive(Clone, Debug)]
pub enum Visibility {
    /// `sets[t]`, identical for every batch row.
    Shared(Vec<Vec<usize>>),
    /// `sets[b * n_queries + t]`.
    PerRow(Vec<Vec<usize>>),
}

impl Visibility {
    pub fn keys(&self, b: usize, t: usize, n_queries: usize) -> &[usize] {
        match self {
            Visibility::Shared(sets) => &sets[t],
            Visibility::PerRow(sets) => &sets[b * n_queries + t],
        }
    }

    pub fn all(n_queries: usize, n_keys: usize) -> Self {
        Visibility::Shared(vec![(0..n_keys).collect(); n_queries])
    }
}

/// Normalized attention weights recorded by an attention node, one row per
/// `(batch, head, query)` over that query's visible keys.
#[derive(Clone, Debug)]
pub struct AttentionProbs {
    heads: usize,
    n_queries: usize,
    starts: Vec<usize>,
    probs: Vec<f64>,
}

impl AttentionProbs {
    fn base(&self, b: usize, h: usize, t: usize) -> (usize, usize) {
        let row0 = self.starts[b * self.n_queries];
        let per_head = self.starts[(b + 1) * self.n_queries] - row0;
        let begin = self.heads * row0 + h * per_head + (self.starts[b * self.n_queries + t] - row0);
        let len = self.starts[b * self.n_queries + t + 1] - self.starts[b * self.n_queries + t];
        (begin, len)
    }

    pub fn row(&self, b: usize, h: usize, t: usize) -> &[f64] {
        let (begin, len) = self.base(b, h, t);
        &self.probs[begin..begin + len]
    }

    fn row_mut(&mut self, b: usize, h: usize, t: usize) -> &mut [f64] {
        let (begin, len) = self.base(b, h, t);
        &mut self.probs[begin..begin + len]
    }
}

enum Op {
    Input,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast { x: Var, b: Var },
    Act { x: Var, kind: Activation },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    MeanAxis { x: Var, axis: usize },
    Attention { q: Var, k: Var, v: Var, vis: Arc<Visibility>, scale: f64, probs: AttentionProbs },
    BlockGather { x: Var, block: usize, stride: usize },
    Concat(Var, Var),
    GateMul { x: Var, gates: Var, channel: usize },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `x[..., K] · w[K, M] (+ b[M])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.ndim(), 2, "linear weight must be 2-D");
        let (k, m) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.last_dim(), k, "linear input width {:?} vs weight {:?}", xv.shape(), wv.shape());
        let rows = xv.len() / k.max(1);
        let mut out = vec![0.0; rows * m];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), m);
            for r in 0..rows {
                out[r * m..(r + 1) * m].copy_from_slice(bv);
            }
        }
        gemm_acc(rows, k, m, xv.data(), false, wv.data(), false, &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c))
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let nb = bv.len();
        assert!(
            xv.shape().ends_with(bv.shape()),
            "cannot broadcast {:?} onto {:?}",
            bv.shape(),
            xv.shape()
        );
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(nb.max(1)) {
            for (d, s) in chunk.iter_mut().zip(bv.data()) {
                *d += s;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::AddBroadcast { x, b })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Act { x, kind })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let k = xv.last_dim();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), k);
        assert_eq!(bt.len(), k);
        let rows = xv.len() / k.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * k..(r + 1) * k];
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..k {
                let h = (row[i] - mean) * rs;
                xhat[r * k + i] = h;
                out[r * k + i] = h * g[i] + bt[i];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = permute_tensor(self.value(x), perm);
        self.push(out, Op::Permute { x, perm: perm.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xv.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if n > 0 {
            for v in &mut out {
                *v /= n as f64;
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        self.push(Tensor::new(new_shape, out), Op::MeanAxis { x, axis })
    }

    /// Scaled dot-product attention restricted to per-query visible key sets.
    ///
    /// `q: [B, H, Nq, Dh]`, `k, v: [B, H, Nk, Dh]`. Queries with no visible
    /// keys produce a zero output row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, vis: Arc<Visibility>, scale: f64) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.ndim(), 4, "attention expects [B, H, N, Dh]");
        let (bsz, heads, nq, dh) = (qv.shape()[0], qv.shape()[1], qv.shape()[2], qv.shape()[3]);
        let nk = kv.shape()[2];
        assert_eq!(kv.shape(), vv.shape());
        assert_eq!(&kv.shape()[..2], &qv.shape()[..2]);
        assert_eq!(kv.shape()[3], dh);

        let mut starts = Vec::with_capacity(bsz * nq + 1);
        starts.push(0);
        for b in 0..bsz {
            for t in 0..nq {
                let keys = vis.keys(b, t, nq);
                debug_assert!(keys.iter().all(|&i| i < nk));
                starts.push(starts.last().unwrap() + keys.len());
            }
        }
        let mut probs = AttentionProbs {
            heads,
            n_queries: nq,
            probs: vec![0.0; heads * starts[bsz * nq]],
            starts,
        };
        let mut out = vec![0.0; qv.len()];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..bsz {
            for h in 0..heads {
                let base = (b * heads + h) * nk * dh;
                for t in 0..nq {
                    let keys = vis.keys(b, t, nq);
                    if keys.is_empty() {
                        continue;
                    }
                    let qo = ((b * heads + h) * nq + t) * dh;
                    let qrow = &qd[qo..qo + dh];
                    let row = probs.row_mut(b, h, t);
                    let mut max = f64::NEG_INFINITY;
                    for (slot, &i) in row.iter_mut().zip(keys) {
                        let krow = &kd[base + i * dh..base + (i + 1) * dh];
                        let s = scale * dot(qrow, krow);
                        *slot = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for p in row.iter_mut() {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    let orow = &mut out[qo..qo + dh];
                    for (p, &i) in row.iter_mut().zip(keys) {
                        *p /= sum;
                        let vrow = &vd[base + i * dh..base + (i + 1) * dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += *p * x;
                        }
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::Attention { q, k, v, vis, scale, probs },
        )
    }

    pub fn attention_probs(&self, v: Var) -> Option<&AttentionProbs> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `[..., N, Dh] -> [..., n_blocks, block, Dh]` with block `i` covering
    /// tokens `i*stride .. i*stride + block`.
    pub fn block_gather(&mut self, x: Var, block: usize, stride: usize, n_blocks: usize) -> Var {
        let xv = self.value(x);
        let nd = xv.ndim();
        assert!(nd >= 2);
        let (n, dh) = (xv.shape()[nd - 2], xv.shape()[nd - 1]);
        assert!(
            n_blocks == 0 || (n_blocks - 1) * stride + block <= n,
            "blocks exceed token axis"
        );
        let outer: usize = xv.shape()[..nd - 2].iter().product();
        let mut out = Vec::with_capacity(outer * n_blocks * block * dh);
        for o in 0..outer {
            for i in 0..n_blocks {
                let start = (o * n + i * stride) * dh;
                out.extend_from_slice(&xv.data()[start..start + block * dh]);
            }
        }
        let mut shape = xv.shape()[..nd - 2].to_vec();
        shape.extend_from_slice(&[n_blocks, block, dh]);
        self.push(Tensor::new(shape, out), Op::BlockGather { x, block, stride })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ka, kb) = (av.last_dim(), bv.last_dim());
        assert_eq!(av.shape()[..av.ndim() - 1], bv.shape()[..bv.ndim() - 1]);
        let rows = av.len() / ka.max(1);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * ka..(r + 1) * ka]);
            out.extend_from_slice(&bv.data()[r * kb..(r + 1) * kb]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ka + kb;
        self.push(Tensor::new(shape, out), Op::Concat(a, b))
    }

    /// `x[..., d] * gates[..., channel]`.
    pub fn gate_mul(&mut self, x: Var, gates: Var, channel: usize) -> Var {
        let (xv, gv) = (self.value(x), self.value(gates));
        let (d, g) = (xv.last_dim(), gv.last_dim());
        assert!(channel < g);
        assert_eq!(xv.len() / d.max(1), gv.len() / g.max(1));
        let mut out = xv.data().to_vec();
        for (r, chunk) in out.chunks_mut(d.max(1)).enumerate() {
            let gate = gv.data()[r * g + channel];
            for v in chunk {
                *v *= gate;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::GateMul { x, gates, channel })
    }

    /// Reverse sweep from `root`, seeded with `seed` (same shape as root).
    pub fn backward(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    /// Gradient for every parameter in the store, zero where unused.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let store = self.store.expect("graph was built without a parameter store");
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&id)
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
            })
            .collect()
    }

    fn propagate(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, m) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / k.max(1);
                let mut dx = vec![0.0; xv.len()];
                gemm_acc(rows, m, k, gy.data(), false, wv.data(), true, &mut dx);
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                let mut dw = vec![0.0; k * m];
                gemm_acc(k, rows, m, xv.data(), true, gy.data(), false, &mut dw);
                accumulate(grads, *w, Tensor::new(vec![k, m], dw));
                if let Some(b) = b {
                    let mut db = vec![0.0; m];
                    for chunk in gy.data().chunks(m.max(1)) {
                        for (d, g) in db.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![m], db));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gy.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = gy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, Tensor::new(gy.shape().to_vec(), da));
                accumulate(grads, *b, Tensor::new(gy.shape().to_vec(), db));
            }
            Op::Scale(x, c) => accumulate(grads, *x, gy.scale(*c)),
            Op::AddBroadcast { x, b } => {
                accumulate(grads, *x, gy.clone());
                let bv = self.value(*b);
                let nb = bv.len();
                let mut db = vec![0.0; nb];
                for chunk in gy.data().chunks(nb.max(1)) {
                    for (d, g) in db.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db));
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                let dx = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| g * kind.derivative(v))
                    .collect();
                accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let g = self.value(*gamma).data();
                let k = g.len();
                let rows = rstd.len();
                let mut dx = vec![0.0; gy.len()];
                let mut dg = vec![0.0; k];
                let mut db = vec![0.0; k];
                let mut dxhat = vec![0.0; k];
                for r in 0..rows {
                    let gyr = &gy.data()[r * k..(r + 1) * k];
                    let xh = &xhat[r * k..(r + 1) * k];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for i in 0..k {
                        dg[i] += gyr[i] * xh[i];
                        db[i] += gyr[i];
                        dxhat[i] = gyr[i] * g[i];
                        mean_d += dxhat[i];
                        mean_dx += dxhat[i] * xh[i];
                    }
                    mean_d /= k as f64;
                    mean_dx /= k as f64;
                    for i in 0..k {
                        dx[r * k + i] = rstd[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
                    }
                }
                accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), dx));
                accumulate(grads, *gamma, Tensor::new(vec![k], dg));
                accumulate(grads, *beta, Tensor::new(vec![k], db));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *x, permute_tensor(gy, &inv));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, gy.clone().reshape(shape));
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.value(*x).shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut dx = vec![0.0; outer * n * inner];
                let inv = if n > 0 { 1.0 / n as f64 } else { 0.0 };
                for o in 0..outer {
                    let src = &gy.data()[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let dst = &mut dx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::Attention { q, k, v, vis, scale, probs } => {
                self.attention_backward(gy, *q, *k, *v, vis, *scale, probs, grads);
            }
            Op::BlockGather { x, block, stride } => {
                let shape = self.value(*x).shape().to_vec();
                let nd = shape.len();
                let (n, dh) = (shape[nd - 2], shape[nd - 1]);
                let outer: usize = shape[..nd - 2].iter().product();
                let n_blocks = gy.shape()[gy.ndim() - 3];
                let mut dx = vec![0.0; outer * n * dh];
                let src = gy.data();
                let mut pos = 0;
                for o in 0..outer {
                    for i in 0..n_blocks {
                        let start = (o * n + i * stride) * dh;
                        for (d, s) in dx[start..start + block * dh].iter_mut().zip(&src[pos..pos + block * dh]) {
                            *d += s;
                        }
                        pos += block * dh;
                    }
                }
                accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::Concat(a, b) => {
                let (ka, kb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let rows = gy.len() / (ka + kb).max(1);
                let mut da = Vec::with_capacity(rows * ka);
                let mut db = Vec::with_capacity(rows * kb);
                for chunk in gy.data().chunks(ka + kb) {
                    da.extend_from_slice(&chunk[..ka]);
                    db.extend_from_slice(&chunk[ka..]);
                }
                accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), da));
                accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db));
            }
            Op::GateMul { x, gates, channel } => {
                let (xv, gv) = (self.value(*x), self.value(*gates));
                let (d, g) = (xv.last_dim(), gv.last_dim());
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; gv.len()];
                for r in 0..xv.len() / d.max(1) {
                    let gate = gv.data()[r * g + channel];
                    let mut acc = 0.0;
                    for i in 0..d {
                        let gi = gy.data()[r * d + i];
                        dx[r * d + i] = gi * gate;
                        acc += gi * xv.data()[r * d + i];
                    }
                    dg[r * g + channel] = acc;
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                accumulate(grads, *gates, Tensor::new(gv.shape().to_vec(), dg));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gy: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        vis: &Visibility,
        scale: f64,
        probs: &AttentionProbs,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (bsz, heads, nq, dh) = (qv.shape()[0], qv.shape()[1], qv.shape()[2], qv.shape()[3]);
        let nk = kv.shape()[2];
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = Vec::new();
        for b in 0..bsz {
            for h in 0..heads {
                let base = (b * heads + h) * nk * dh;
                for t in 0..nq {
                    let keys = vis.keys(b, t, nq);
                    if keys.is_empty() {
                        continue;
                    }
                    let qo = ((b * heads + h) * nq + t) * dh;
                    let go = &gy.data()[qo..qo + dh];
                    let row = probs.row(b, h, t);
                    dp.clear();
                    let mut weighted = 0.0;
                    for (&p, &i) in row.iter().zip(keys) {
                        let vrow = &vv.data()[base + i * dh..base + (i + 1) * dh];
                        let d = dot(go, vrow);
                        dp.push(d);
                        weighted += p * d;
                        for (dvv, g) in dv[base + i * dh..base + (i + 1) * dh].iter_mut().zip(go) {
                            *dvv += p * g;
                        }
                    }
                    let qrow = &qv.data()[qo..qo + dh];
                    for ((&p, &d), &i) in row.iter().zip(&dp).zip(keys) {
                        let ds = scale * p * (d - weighted);
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kv.data()[base + i * dh..base + (i + 1) * dh];
                        for j in 0..dh {
                            dq[qo + j] += ds * krow[j];
                            dk[base + i * dh + j] += ds * qrow[j];
                        }
                    }
                }
            }
        }
        accumulate(grads, q, Tensor::new(qv.shape().to_vec(), dq));
        accumulate(grads, k, Tensor::new(kv.shape().to_vec(), dk));
        accumulate(grads, v, Tensor::new(vv.shape().to_vec(), dv));
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(x.data()[src]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
