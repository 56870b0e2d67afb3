//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! Values are dense row-major `f64` tensors. Each op records what its
//! backward pass needs; [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients. Ops are fused where that keeps the backward simple
//! (attention, layer norm, softmax cross-entropy).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} values", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 { 1 } else { self.shape[0] }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

const PAR_THRESHOLD: usize = 1 << 15;

/// `c[n,m] = a[n,k] * b[k,m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    let kernel = |(i, crow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD && m > 0 {
        c.par_chunks_mut(m).enumerate().for_each(kernel);
    } else if m > 0 {
        c.chunks_mut(m).enumerate().for_each(kernel);
    }
    c
}

/// `c[n,k] = g[n,m] * b[k,m]^T`.
fn matmul_bt(g: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * k];
    let kernel = |(i, crow): (usize, &mut [f64])| {
        let grow = &g[i * m..(i + 1) * m];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            *cv = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if n * k * m >= PAR_THRESHOLD && k > 0 {
        c.par_chunks_mut(k).enumerate().for_each(kernel);
    } else if k > 0 {
        c.chunks_mut(k).enumerate().for_each(kernel);
    }
    c
}

/// `c[k,m] = a[n,k]^T * g[n,m]`.
fn matmul_at(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * m];
    let kernel = |(p, crow): (usize, &mut [f64])| {
        for i in 0..n {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &g[i * m..(i + 1) * m];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD && m > 0 {
        c.par_chunks_mut(m).enumerate().for_each(kernel);
    } else if m > 0 {
        c.chunks_mut(m).enumerate().for_each(kernel);
    }
    c
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry shared by the sequence-shaped ops: rows are laid out as
/// `batch * seq` consecutive positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub seq: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { table: Var, ids: Vec<u32> },
    SelectRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Rotary { x: Var, seq: usize, head_dim: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, shape: SeqShape, heads: usize, key_mask: Vec<bool>, probs: Vec<f64> },
    MaskedMean { x: Var, shape: SeqShape, mask: Vec<bool> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Unfold { x: Var, shape: SeqShape, width: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn rotary_angles(seq: usize, head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for t in 0..seq {
        for i in 0..half {
            let theta = (t as f64) * base.powf(-2.0 * i as f64 / head_dim as f64);
            cos.push(theta.cos());
            sin.push(theta.sin());
        }
    }
    (cos, sin)
}

/// Rotates interleaved pairs `(x[2i], x[2i+1])` of one head vector by
/// `position * base^(-2i/head_dim)`.
pub fn rotate_vector(x: &[f64], position: usize, base: f64) -> Vec<f64> {
    let hd = x.len();
    let mut out = x.to_vec();
    for i in 0..hd / 2 {
        let theta = position as f64 * base.powf(-2.0 * i as f64 / hd as f64);
        let (s, c) = theta.sin_cos();
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims2(a);
        let (k2, m) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = matmul(&self.value(a).data, &self.value(b).data, n, k, m);
        self.push(Tensor::new(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape.clone();
        self.push(Tensor::new(shape, data), Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`m` row vector to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        let m = va.cols();
        assert_eq!(vb.numel(), m, "bias length");
        let mut data = va.data.clone();
        for row in data.chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        let shape = va.shape.clone();
        self.push(Tensor::new(shape, data), Op::AddRow(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mul shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let shape = va.shape.clone();
        self.push(Tensor::new(shape, data), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape.clone(), va.data.iter().map(|x| x * s).collect());
        self.push(t, Op::Scale(a, s), &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape.clone(), va.data.iter().map(|&x| f(x)).collect());
        self.push(t, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Swish with unit slope: `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let m = vx.cols();
        let n = vx.numel() / m;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut out = vec![0.0; n * m];
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &vx.data[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..m {
                let h = (row[j] - mean) * r;
                xhat[i * m + j] = h;
                out[i * m + j] = h * g[j] + b[j];
            }
        }
        let shape = vx.shape.clone();
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(t.row(id as usize));
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out),
            Op::Gather { table, ids: ids.to_vec() },
            &[table],
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let t = self.value(x);
        let d = t.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        self.push(
            Tensor::new(vec![rows.len(), d], out),
            Op::SelectRows { x, rows: rows.to_vec() },
            &[x],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        assert!(start <= end && end <= m);
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&t.data[i * m + start..i * m + end]);
        }
        self.push(Tensor::new(vec![n, end - start], out), Op::SliceCols { x, start }, &[x])
    }

    /// Rotary position embedding on `[batch * seq, heads * head_dim]` rows;
    /// the position of row `r` is `r % seq`.
    pub fn rotary(&mut self, x: Var, seq: usize, head_dim: usize, base: f64) -> Var {
        assert!(head_dim.is_multiple_of(2), "rotary needs an even head dimension");
        let t = self.value(x);
        let d = t.cols();
        let half = head_dim / 2;
        let (cos, sin) = rotary_angles(seq, head_dim, base);
        let mut out = t.data.clone();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let pos = r % seq;
            for head in row.chunks_mut(head_dim) {
                for i in 0..half {
                    let (c, s) = (cos[pos * half + i], sin[pos * half + i]);
                    let (a, b) = (head[2 * i], head[2 * i + 1]);
                    head[2 * i] = a * c - b * s;
                    head[2 * i + 1] = a * s + b * c;
                }
            }
        }
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, out), Op::Rotary { x, seq, head_dim, base }, &[x])
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `[batch * seq, heads * head_dim]`; keys with a false mask get zero
    /// weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: SeqShape, heads: usize, key_mask: &[bool]) -> Var {
        let d = self.value(q).cols();
        let hd = d / heads;
        let (b, t) = (shape.batch, shape.seq);
        assert_eq!(key_mask.len(), b * t);
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);

        // One block per (batch, head): probs [t, t] and output [t, hd].
        let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..b * heads)
            .into_par_iter()
            .map(|bh| {
                let (bi, h) = (bh / heads, bh % heads);
                let mut probs = vec![0.0; t * t];
                let mut out = vec![0.0; t * hd];
                for i in 0..t {
                    let qi = &qd[(bi * t + i) * d + h * hd..][..hd];
                    let prow = &mut probs[i * t..(i + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        if key_mask[bi * t + j] {
                            let kj = &kd[(bi * t + j) * d + h * hd..][..hd];
                            let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                            prow[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..t {
                        if key_mask[bi * t + j] {
                            let e = (prow[j] - max).exp();
                            prow[j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out[i * hd..(i + 1) * hd];
                    for j in 0..t {
                        if key_mask[bi * t + j] {
                            prow[j] /= z;
                            let vj = &vd[(bi * t + j) * d + h * hd..][..hd];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += prow[j] * x;
                            }
                        }
                    }
                }
                (probs, out)
            })
            .collect();

        let mut out = vec![0.0; b * t * d];
        let mut probs = Vec::with_capacity(b * heads * t * t);
        for (bh, (p, o)) in blocks.into_iter().enumerate() {
            let (bi, h) = (bh / heads, bh % heads);
            for i in 0..t {
                out[(bi * t + i) * d + h * hd..][..hd].copy_from_slice(&o[i * hd..(i + 1) * hd]);
            }
            probs.extend(p);
        }
        self.push(
            Tensor::new(vec![b * t, d], out),
            Op::Attention { q, k, v, shape, heads, key_mask: key_mask.to_vec(), probs },
            &[q, k, v],
        )
    }

    /// Attention weights recorded by an attention node, laid out
    /// `[batch, heads, query, key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over the masked-in positions of each sequence: `[batch * seq, d]`
    /// to `[batch, d]`.
    pub fn masked_mean(&mut self, x: Var, shape: SeqShape, mask: &[bool]) -> Var {
        let t = self.value(x);
        let d = t.cols();
        let mut out = vec![0.0; shape.batch * d];
        for b in 0..shape.batch {
            let count = (0..shape.seq).filter(|&s| mask[b * shape.seq + s]).count().max(1) as f64;
            let orow = &mut out[b * d..(b + 1) * d];
            for s in 0..shape.seq {
                if mask[b * shape.seq + s] {
                    for (o, v) in orow.iter_mut().zip(t.row(b * shape.seq + s)) {
                        *o += v;
                    }
                }
            }
            orow.iter_mut().for_each(|o| *o /= count);
        }
        self.push(
            Tensor::new(vec![shape.batch, d], out),
            Op::MaskedMean { x, shape, mask: mask.to_vec() },
            &[x],
        )
    }

    /// Mean softmax cross-entropy over rows with a target; rows with `None`
    /// are ignored. Returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let t = self.value(logits);
        let c = t.cols();
        assert_eq!(t.rows(), targets.len());
        let mut probs = vec![0.0; t.numel()];
        let mut loss = 0.0;
        let mut count = 0usize;
        for (i, target) in targets.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / z;
            }
            if let Some(y) = target {
                loss += -(row[*y] - max - z.ln());
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { loss / count as f64 };
        self.push(
            Tensor::new(vec![1], vec![value]),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// im2col for a valid 1-D convolution: `[batch * len, channels]` to
    /// `[batch * (len - width + 1), width * channels]`.
    pub fn unfold(&mut self, x: Var, shape: SeqShape, width: usize) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let positions = shape.seq + 1 - width;
        let mut out = Vec::with_capacity(shape.batch * positions * width * c);
        for b in 0..shape.batch {
            for p in 0..positions {
                let start = (b * shape.seq + p) * c;
                out.extend_from_slice(&t.data[start..start + width * c]);
            }
        }
        self.push(
            Tensor::new(vec![shape.batch * positions, width * c], out),
            Op::Unfold { x, shape, width },
            &[x],
        )
    }

    /// Max over positions: `[batch * positions, f]` to `[batch, f]`.
    pub fn max_pool(&mut self, x: Var, shape: SeqShape) -> Var {
        let t = self.value(x);
        let f = t.cols();
        let mut out = vec![f64::NEG_INFINITY; shape.batch * f];
        let mut argmax = vec![0usize; shape.batch * f];
        for b in 0..shape.batch {
            for p in 0..shape.seq {
                let r = b * shape.seq + p;
                for (j, &v) in t.row(r).iter().enumerate() {
                    if v > out[b * f + j] {
                        out[b * f + j] = v;
                        argmax[b * f + j] = r;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![shape.batch, f], out), Op::MaxPool { x, argmax }, &[x])
    }

    /// Inverted dropout with keep-probability `1 - rate`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let t = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::Dropout { x, mask }, &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&self.value(loss).shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contribs: Vec<(Var, Tensor)> = Vec::new();
            let val = |v: Var| &self.nodes[v.0].value;
            let wants = |v: Var| self.nodes[v.0].needs_grad;

            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                    if wants(*a) {
                        contribs.push((*a, Tensor::new(va.shape.clone(), matmul_bt(&g.data, &vb.data, n, k, m))));
                    }
                    if wants(*b) {
                        contribs.push((*b, Tensor::new(vb.shape.clone(), matmul_at(&va.data, &g.data, n, k, m))));
                    }
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g));
                }
                Op::AddRow(a, bias) => {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for row in g.data.chunks(m) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    contribs.push((*bias, Tensor::new(val(*bias).shape.clone(), gb)));
                    contribs.push((*a, g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if wants(*a) {
                        let d = g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
                        contribs.push((*a, Tensor::new(g.shape.clone(), d)));
                    }
                    if wants(*b) {
                        let d = g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect();
                        contribs.push((*b, Tensor::new(g.shape.clone(), d)));
                    }
                }
                Op::Scale(a, s) => {
                    let d = g.data.iter().map(|x| x * s).collect();
                    contribs.push((*a, Tensor::new(g.shape.clone(), d)));
                }
                Op::Relu(a) => {
                    let d = g.data.iter().zip(&val(*a).data).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect();
                    contribs.push((*a, Tensor::new(g.shape.clone(), d)));
                }
                Op::Silu(a) => {
                    let d = g
                        .data
                        .iter()
                        .zip(&val(*a).data)
                        .map(|(gv, &x)| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    contribs.push((*a, Tensor::new(g.shape.clone(), d)));
                }
                Op::Sigmoid(a) => {
                    let d = g.data.iter().zip(&node.value.data).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    contribs.push((*a, Tensor::new(g.shape.clone(), d)));
                }
                Op::Tanh(a) => {
                    let d = g.data.iter().zip(&node.value.data).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                    contribs.push((*a, Tensor::new(g.shape.clone(), d)));
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let m = g.cols();
                    let n = g.numel() / m;
                    let gam = &val(*gamma).data;
                    let mut dgamma = vec![0.0; m];
                    let mut dbeta = vec![0.0; m];
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        let gr = &g.data[i * m..(i + 1) * m];
                        let xh = &xhat[i * m..(i + 1) * m];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..m {
                            dgamma[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                            let dxh = gr[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= m as f64;
                        mean_dxh_xh /= m as f64;
                        for j in 0..m {
                            let dxh = gr[j] * gam[j];
                            dx[i * m + j] = rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    contribs.push((*x, Tensor::new(g.shape.clone(), dx)));
                    contribs.push((*gamma, Tensor::new(val(*gamma).shape.clone(), dgamma)));
                    contribs.push((*beta, Tensor::new(val(*beta).shape.clone(), dbeta)));
                }
                Op::Gather { table, ids } => {
                    let t = val(*table);
                    let d = t.cols();
                    let mut dt = Tensor::zeros(&t.shape);
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data[id as usize * d..(id as usize + 1) * d];
                        for (a, b) in dst.iter_mut().zip(&g.data[i * d..(i + 1) * d]) {
                            *a += b;
                        }
                    }
                    contribs.push((*table, dt));
                }
                Op::SelectRows { x, rows } => {
                    let t = val(*x);
                    let d = t.cols();
                    let mut dx = Tensor::zeros(&t.shape);
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut dx.data[r * d..(r + 1) * d];
                        for (a, b) in dst.iter_mut().zip(&g.data[i * d..(i + 1) * d]) {
                            *a += b;
                        }
                    }
                    contribs.push((*x, dx));
                }
                Op::SliceCols { x, start } => {
                    let t = val(*x);
                    let (n, m) = (t.rows(), t.cols());
                    let w = g.cols();
                    let mut dx = Tensor::zeros(&t.shape);
                    for i in 0..n {
                        dx.data[i * m + start..i * m + start + w].copy_from_slice(&g.data[i * w..(i + 1) * w]);
                    }
                    contribs.push((*x, dx));
                }
                Op::Rotary { x, seq, head_dim, base } => {
                    let d = g.cols();
                    let half = head_dim / 2;
                    let (cos, sin) = rotary_angles(*seq, *head_dim, *base);
                    let mut dx = g.data.clone();
                    for (r, row) in dx.chunks_mut(d).enumerate() {
                        let pos = r % seq;
                        for head in row.chunks_mut(*head_dim) {
                            for i in 0..half {
                                let (c, s) = (cos[pos * half + i], sin[pos * half + i]);
                                let (a, b) = (head[2 * i], head[2 * i + 1]);
                                head[2 * i] = a * c + b * s;
                                head[2 * i + 1] = -a * s + b * c;
                            }
                        }
                    }
                    contribs.push((*x, Tensor::new(g.shape.clone(), dx)));
                }
                Op::Attention { q, k, v, shape, heads, key_mask, probs } => {
                    let (qd, kd, vd) = (&val(*q).data, &val(*k).data, &val(*v).data);
                    let d = g.cols();
                    let hd = d / heads;
                    let (b, t) = (shape.batch, shape.seq);
                    let scale = 1.0 / (hd as f64).sqrt();
                    let blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..b * heads)
                        .into_par_iter()
                        .map(|bh| {
                            let (bi, h) = (bh / heads, bh % heads);
                            let p = &probs[bh * t * t..(bh + 1) * t * t];
                            let at = |data: &[f64], i: usize| -> Vec<f64> { data[(bi * t + i) * d + h * hd..][..hd].to_vec() };
                            let mut dq = vec![0.0; t * hd];
                            let mut dk = vec![0.0; t * hd];
                            let mut dv = vec![0.0; t * hd];
                            let mut dp = vec![0.0; t];
                            for i in 0..t {
                                let go = &g.data[(bi * t + i) * d + h * hd..][..hd];
                                let prow = &p[i * t..(i + 1) * t];
                                let mut dot = 0.0;
                                for j in 0..t {
                                    dp[j] = 0.0;
                                    if !key_mask[bi * t + j] || prow[j] == 0.0 {
                                        continue;
                                    }
                                    let vj = at(vd, j);
                                    dp[j] = go.iter().zip(&vj).map(|(x, y)| x * y).sum();
                                    dot += prow[j] * dp[j];
                                    for (dvx, gx) in dv[j * hd..(j + 1) * hd].iter_mut().zip(go) {
                                        *dvx += prow[j] * gx;
                                    }
                                }
                                let qi = at(qd, i);
                                for j in 0..t {
                                    if !key_mask[bi * t + j] || prow[j] == 0.0 {
                                        continue;
                                    }
                                    let ds = prow[j] * (dp[j] - dot) * scale;
                                    let kj = at(kd, j);
                                    for c in 0..hd {
                                        dq[i * hd + c] += ds * kj[c];
                                        dk[j * hd + c] += ds * qi[c];
                                    }
                                }
                            }
                            (dq, dk, dv)
                        })
                        .collect();
                    let mut dq = vec![0.0; b * t * d];
                    let mut dk = vec![0.0; b * t * d];
                    let mut dv = vec![0.0; b * t * d];
                    for (bh, (bq, bk, bv)) in blocks.into_iter().enumerate() {
                        let (bi, h) = (bh / heads, bh % heads);
                        for i in 0..t {
                            let off = (bi * t + i) * d + h * hd;
                            dq[off..off + hd].copy_from_slice(&bq[i * hd..(i + 1) * hd]);
                            dk[off..off + hd].copy_from_slice(&bk[i * hd..(i + 1) * hd]);
                            dv[off..off + hd].copy_from_slice(&bv[i * hd..(i + 1) * hd]);
                        }
                    }
                    let sh = g.shape.clone();
                    contribs.push((*q, Tensor::new(sh.clone(), dq)));
                    contribs.push((*k, Tensor::new(sh.clone(), dk)));
                    contribs.push((*v, Tensor::new(sh, dv)));
                }
                Op::MaskedMean { x, shape, mask } => {
                    let d = g.cols();
                    let mut dx = Tensor::zeros(&val(*x).shape);
                    for b in 0..shape.batch {
                        let count = (0..shape.seq).filter(|&s| mask[b * shape.seq + s]).count().max(1) as f64;
                        for s in 0..shape.seq {
                            let r = b * shape.seq + s;
                            if mask[r] {
                                for j in 0..d {
                                    dx.data[r * d + j] = g.data[b * d + j] / count;
                                }
                            }
                        }
                    }
                    contribs.push((*x, dx));
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let c = val(*logits).cols();
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    let mut dl = vec![0.0; probs.len()];
                    if count > 0 {
                        let s = g.data[0] / count as f64;
                        for (i, target) in targets.iter().enumerate() {
                            if let Some(y) = target {
                                for j in 0..c {
                                    dl[i * c + j] = probs[i * c + j] * s;
                                }
                                dl[i * c + y] -= s;
                            }
                        }
                    }
                    contribs.push((*logits, Tensor::new(val(*logits).shape.clone(), dl)));
                }
                Op::Unfold { x, shape, width } => {
                    let t = val(*x);
                    let c = t.cols();
                    let positions = shape.seq + 1 - width;
                    let mut dx = Tensor::zeros(&t.shape);
                    let w = width * c;
                    for b in 0..shape.batch {
                        for p in 0..positions {
                            let src = &g.data[(b * positions + p) * w..][..w];
                            let start = (b * shape.seq + p) * c;
                            for (a, s) in dx.data[start..start + w].iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    }
                    contribs.push((*x, dx));
                }
                Op::MaxPool { x, argmax, .. } => {
                    let t = val(*x);
                    let f = t.cols();
                    let mut dx = Tensor::zeros(&t.shape);
                    for (i, &r) in argmax.iter().enumerate() {
                        dx.data[r * f + i % f] += g.data[i];
                    }
                    contribs.push((*x, dx));
                }
                Op::Dropout { x, mask } => {
                    let d = g.data.iter().zip(mask).map(|(a, m)| a * m).collect();
                    contribs.push((*x, Tensor::new(g.shape.clone(), d)));
                }
            }

            for (v, t) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Gradients { grads }
    }
}

/// Named parameter tensors in a fixed insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(self.index(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }

    /// Places every parameter on `tape`; `trainable` decides which ones
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| tape.leaf(t.clone(), trainable(n)))
            .collect();
        Bound {
            names: self.names.clone(),
            vars,
        }
    }
}

/// Parameters placed on a tape.
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the parameter order; `None` for frozen or
    /// unused parameters.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to matrices only.
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: params.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    /// One update; parameters are rounded back to `f32` precision so that the
    /// stored checkpoint reproduces them exactly.
    pub fn update(&mut self, params: &mut Params, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut params.tensors_mut()[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = if p.shape.len() == 2 { 1.0 - lr * self.weight_decay } else { 1.0 };
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] = (p.data[j] * decay - lr * mhat / (vhat.sqrt() + self.eps)) as f32 as f64;
            }
        }
        Ok(())
    }
}

/// Finite-difference helpers for checking hand-written backward passes.
pub mod gradcheck {
    use super::*;

    /// Norm-wise relative error between two gradient vectors.
    pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale == 0.0 { 0.0 } else { diff / scale }
    }

    /// Central differences of `loss` with respect to the listed entries of
    /// parameter `name`.
    pub fn numeric(params: &Params, name: &str, entries: &[usize], h: f64, loss: &dyn Fn(&Params) -> f64) -> Vec<f64> {
        let mut p = params.clone();
        entries
            .iter()
            .map(|&e| {
                let orig = p.get(name).unwrap().data[e];
                p.get_mut(name).unwrap().data[e] = orig + h;
                let up = loss(&p);
                p.get_mut(name).unwrap().data[e] = orig - h;
                let down = loss(&p);
                p.get_mut(name).unwrap().data[e] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_op(build: impl Fn(&mut Tape, &[Var]) -> Var, shapes: &[Vec<usize>], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (i, s) in shapes.iter().enumerate() {
            params.insert(format!("p{i}"), Tensor::randn(s, 1.0, &mut rng));
        }
        let loss_of = |p: &Params| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, |_| true);
            let out = build(&mut tape, b.vars());
            tape.value(out).scalar()
        };
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, |_| true);
        let out = build(&mut tape, b.vars());
        let mut grads = tape.backward(out);
        let g = b.collect_grads(&mut grads);
        for (i, name) in params.names().iter().enumerate() {
            let n = params.get(name).unwrap().numel();
            let entries: Vec<usize> = (0..n).collect();
            let num = gradcheck::numeric(&params, name, &entries, 1e-6, &loss_of);
            let ana = g[i].as_ref().map(|t| t.data.clone()).unwrap_or(vec![0.0; n]);
            let err = gradcheck::relative_error(&ana, &num);
            assert!(err < 1e-6, "{name}: rel err {err}\n{ana:?}\n{num:?}");
        }
    }

    /// Reduces any tensor to a scalar through a fixed random projection.
    fn project(tape: &mut Tape, x: Var) -> Var {
        let t = tape.value(x).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = Tensor::randn(&[t.cols(), 1], 1.0, &mut rng);
        let w = tape.constant(w);
        let flat = tape.matmul(x, w);
        let n = tape.value(flat).rows();
        let ones = tape.constant(Tensor::filled(&[1, n], 1.0));
        tape.matmul(ones, flat)
    }

    #[test]
    fn grad_matmul_addrow() {
        check_op(|t, v| { let m = t.matmul(v[0], v[1]); let a = t.add_row(m, v[2]); project(t, a) }, &[vec![3, 4], vec![4, 5], vec![5]], 1);
    }

    #[test]
    fn grad_elementwise() {
        check_op(|t, v| { let a = t.silu(v[0]); let b = t.tanh(v[1]); let c = t.mul(a, b); let d = t.sigmoid(c); let e = t.add(d, v[0]); let f = t.scale(e, 0.7); project(t, f) }, &[vec![4, 3], vec![4, 3]], 2);
        check_op(|t, v| { let a = t.relu(v[0]); project(t, a) }, &[vec![5, 3]], 3);
    }

    #[test]
    fn grad_layer_norm() {
        check_op(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5); project(t, y) }, &[vec![4, 6], vec![6], vec![6]], 4);
    }

    #[test]
    fn grad_gather_select_slice() {
        check_op(|t, v| { let g = t.gather(v[0], &[2, 0, 2, 4]); let s = t.select_rows(g, &[3, 1, 1]); let c = t.slice_cols(s, 1, 3); project(t, c) }, &[vec![5, 4]], 5);
    }

    #[test]
    fn grad_rotary_attention() {
        let shape = SeqShape { batch: 2, seq: 4 };
        let mask = [true, true, true, false, true, true, false, false];
        check_op(
            move |t, v| {
                let q = t.rotary(v[0], 4, 2, 10_000.0);
                let k = t.rotary(v[1], 4, 2, 10_000.0);
                let a = t.attention(q, k, v[2], shape, 2, &mask);
                let p = t.masked_mean(a, shape, &mask);
                project(t, p)
            },
            &[vec![8, 4], vec![8, 4], vec![8, 4]],
            6,
        );
    }

    #[test]
    fn grad_cross_entropy() {
        check_op(|t, v| t.softmax_cross_entropy(v[0], &[Some(1), None, Some(0), Some(2)]), &[vec![4, 3]], 7);
    }

    #[test]
    fn grad_conv_pool() {
        let shape = SeqShape { batch: 2, seq: 6 };
        check_op(
            move |t, v| {
                let u = t.unfold(v[0], shape, 3);
                let c = t.matmul(u, v[1]);
                let p = t.max_pool(c, SeqShape { batch: 2, seq: 4 });
                project(t, p)
            },
            &[vec![12, 2], vec![6, 3]],
            8,
        );
    }

    #[test]
    fn rotary_relative_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q: Vec<f64> = Tensor::randn(&[16], 1.0, &mut rng).data;
        let k: Vec<f64> = Tensor::randn(&[16], 1.0, &mut rng).data;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let s0 = dot(&rotate_vector(&q, 3, 10_000.0), &rotate_vector(&k, 7, 10_000.0));
        for shift in [1, 5, 100, 1000] {
            let s = dot(&rotate_vector(&q, 3 + shift, 10_000.0), &rotate_vector(&k, 7 + shift, 10_000.0));
            assert!((s - s0).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, k, m) = (70, 33, 40);
        let a = Tensor::randn(&[n, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, m], 1.0, &mut rng);
        let c = matmul(&a.data, &b.data, n, k, m);
        for i in 0..n {
            for j in 0..m {
                let s: f64 = (0..k).map(|p| a.data[i * k + p] * b.data[p * m + j]).sum();
                assert!((s - c[i * m + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adam_frozen_params_untouched() {
        let mut p = Params::new();
        p.insert("a", Tensor::filled(&[2], 1.0));
        p.insert("b", Tensor::filled(&[2], 1.0));
        let mut opt = Adam::new(&p);
        opt.update(&mut p, &[Some(Tensor::filled(&[2], 1.0)), None], 0.1).unwrap();
        assert!(p.get("a").unwrap().data.iter().all(|&x| (x - 0.9).abs() < 1e-6));
        assert_eq!(p.get("b").unwrap().data, vec![1.0, 1.0]);
    }
}
