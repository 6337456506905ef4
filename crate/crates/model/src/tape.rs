//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse from a scalar loss. Losses are fused operations whose
//! input gradients are computed during the forward pass.

use std::borrow::Cow;
use std::sync::Arc;

use evstream_core::Scalar;

use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

pub const LOG_SCALE_MIN: f64 = -20.0;
pub const LOG_SCALE_MAX: f64 = 10.0;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weighted row lookups, CSR-encoded: output row `r` is
/// `Σ w · table[idx]` over `offsets[r]..offsets[r + 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Groups<T> {
    pub offsets: Vec<usize>,
    pub indices: Vec<u32>,
    pub weights: Vec<T>,
}

impl<T: Scalar> Groups<T> {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            indices: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn push(&mut self, items: impl IntoIterator<Item = (u32, T)>) {
        for (i, w) in items {
            self.indices.push(i);
            self.weights.push(w);
        }
        self.offsets.push(self.indices.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Target of a presence + Gaussian head: columns of the head output holding
/// the presence logit, mean and log-scale; `value` when observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericTarget<T> {
    pub row: usize,
    pub presence_col: usize,
    pub mean_col: usize,
    pub log_scale_col: usize,
    pub present: bool,
    pub value: Option<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionShape {
    pub n_seq: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embed {
        table: Var,
        groups: Arc<Groups<T>>,
    },
    SelectRows {
        x: Var,
        rows: Arc<Vec<Option<usize>>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<T>,
    },
    /// Scalar loss with its input gradient precomputed.
    Loss {
        x: Var,
        grad: Tensor<T>,
    },
    Sum(Vec<Var>),
}

struct Node<'a, T: Clone> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
}

/// Operation record of one forward pass. Leaves may borrow their values.
pub struct Tape<'a, T: Clone> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn leaf_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((r.rows, r.cols), (1, v.cols), "add_row shape mismatch");
        for i in 0..v.rows {
            for (x, y) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x += *y;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x *= c;
        }
        self.push(v, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x = gelu(*x);
        }
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = (xv.rows, xv.cols);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = Tensor::zeros(n, m);
        let mut xhat = vec![T::zero(); n * m];
        let mut rstd = vec![T::zero(); n];
        let mf = T::of(m as f64);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / mf;
            let r = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[i] = r;
            for j in 0..m {
                let h = (row[j] - mean) * r;
                xhat[i * m + j] = h;
                out.data[i * m + j] = h * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn embed(&mut self, table: Var, groups: Arc<Groups<T>>) -> Var {
        let t = self.value(table);
        let d = t.cols;
        let mut out = Tensor::zeros(groups.rows(), d);
        for r in 0..groups.rows() {
            let dst = out.row_mut(r);
            for k in groups.offsets[r]..groups.offsets[r + 1] {
                let idx = groups.indices[k] as usize;
                let w = groups.weights[k];
                for (o, e) in dst.iter_mut().zip(t.row(idx)) {
                    *o += *e * w;
                }
            }
        }
        self.push(out, Op::Embed { table, groups })
    }

    /// Gathers rows; `None` yields a zero row.
    pub fn select_rows(&mut self, x: Var, rows: Arc<Vec<Option<usize>>>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(rows.len(), xv.cols);
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                out.row_mut(i).copy_from_slice(xv.row(*r));
            }
        }
        self.push(out, Op::SelectRows { x, rows })
    }

    /// Multi-head scaled dot-product attention over `n_seq` independent
    /// sequences of `seq_len` rows each. `key_mask[s·L + j] = false` hides key
    /// `j` of sequence `s`; a query with no visible key outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape, key_mask: Option<&[bool]>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        let AttentionShape {
            n_seq,
            seq_len: l,
            heads,
            causal,
        } = shape;
        assert_eq!(qv.rows, n_seq * l, "attention rows mismatch");
        assert_eq!(d % heads, 0, "hidden size not divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows, d);
        let mut probs = vec![T::zero(); n_seq * heads * l * l];
        let mut scores = vec![T::zero(); l];
        for s in 0..n_seq {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..l {
                    let qi = &qv.row(s * l + i)[c0..c0 + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..l {
                        let visible = (!causal || j <= i) && key_mask.is_none_or(|m| m[s * l + j]);
                        scores[j] = if visible {
                            let kj = &kv.row(s * l + j)[c0..c0 + dh];
                            let mut dot = T::zero();
                            for (a, b) in qi.iter().zip(kj) {
                                dot += *a * *b;
                            }
                            let sc = dot * scale;
                            if sc > max {
                                max = sc;
                            }
                            sc
                        } else {
                            T::neg_infinity()
                        };
                    }
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let mut z = T::zero();
                    for sc in scores.iter_mut() {
                        *sc = if *sc == T::neg_infinity() {
                            T::zero()
                        } else {
                            (*sc - max).exp()
                        };
                        z += *sc;
                    }
                    let p = &mut probs[((s * heads + h) * l + i) * l..((s * heads + h) * l + i + 1) * l];
                    for (pj, sc) in p.iter_mut().zip(&scores) {
                        *pj = *sc / z;
                    }
                    let orow = &mut out.data[(s * l + i) * d + c0..(s * l + i) * d + c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == T::zero() {
                            continue;
                        }
                        let vj = &vv.row(s * l + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * *x;
                        }
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, shape, probs })
    }

    /// Summed cross-entropy of `(row, class)` targets under row-wise softmax.
    pub fn categorical_nll(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let lv = self.value(logits);
        let c = lv.cols;
        let mut grad = Tensor::zeros(lv.rows, c);
        let mut total = T::zero();
        let mut probs = vec![T::zero(); c];
        for &(r, class) in targets {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, x) in probs.iter_mut().zip(row) {
                *p = (*x - max).exp();
                z += *p;
            }
            total += z.ln() + max - row[class];
            let g = grad.row_mut(r);
            for (gj, p) in g.iter_mut().zip(&probs) {
                *gj += *p / z;
            }
            g[class] -= T::one();
        }
        self.push(Tensor::scalar(total), Op::Loss { x: logits, grad })
    }

    /// Summed presence BCE plus Gaussian NLL of observed values. Log-scales
    /// are clamped to `[LOG_SCALE_MIN, LOG_SCALE_MAX]`.
    pub fn numeric_nll(&mut self, x: Var, targets: &[NumericTarget<T>]) -> Var {
        let xv = self.value(x);
        let mut grad = Tensor::zeros(xv.rows, xv.cols);
        let mut total = T::zero();
        let half_ln_2pi = T::of(0.5 * (2.0 * std::f64::consts::PI).ln());
        for t in targets {
            let a = xv.get(t.row, t.presence_col);
            let y = if t.present { T::one() } else { T::zero() };
            total += softplus(a) - y * a;
            grad.data[t.row * xv.cols + t.presence_col] += sigmoid(a) - y;
            if let Some(v) = t.value {
                let mu = xv.get(t.row, t.mean_col);
                let raw = xv.get(t.row, t.log_scale_col);
                let (s, inside) = clamp_log_scale(raw);
                let z = (v - mu) / s.exp();
                total += T::of(0.5) * z * z + s + half_ln_2pi;
                grad.data[t.row * xv.cols + t.mean_col] -= z / s.exp();
                if inside {
                    grad.data[t.row * xv.cols + t.log_scale_col] += T::one() - z * z;
                }
            }
        }
        self.push(Tensor::scalar(total), Op::Loss { x, grad })
    }

    /// Summed negative log-density of `(row, delta)` under a `k`-component
    /// log-normal mixture read from columns `[logits | means | log-scales]`.
    pub fn tte_nll(&mut self, x: Var, k: usize, targets: &[(usize, T)]) -> Var {
        let xv = self.value(x);
        let mut grad = Tensor::zeros(xv.rows, xv.cols);
        let mut total = T::zero();
        let mut comp = vec![T::zero(); k];
        let mut zs = vec![T::zero(); k];
        for &(r, delta) in targets {
            let row = xv.row(r);
            let (logits, rest) = row.split_at(k);
            let (means, scales) = rest.split_at(k);
            let lse_w = log_sum_exp(logits);
            let ld = delta.ln();
            for j in 0..k {
                let (s, _) = clamp_log_scale(scales[j]);
                let z = (ld - means[j]) / s.exp();
                zs[j] = z;
                comp[j] =
                    logits[j] - lse_w - ld - s - T::of(0.5 * (2.0 * std::f64::consts::PI).ln()) - T::of(0.5) * z * z;
            }
            let lp = log_sum_exp(&comp);
            total -= lp;
            let g = grad.row_mut(r);
            for j in 0..k {
                let resp = (comp[j] - lp).exp();
                let w = (logits[j] - lse_w).exp();
                g[j] += w - resp;
                let (s, inside) = clamp_log_scale(scales[j]);
                g[k + j] -= resp * zs[j] / s.exp();
                if inside {
                    g[2 * k + j] += resp * (T::one() - zs[j] * zs[j]);
                }
            }
        }
        self.push(Tensor::scalar(total), Op::Loss { x, grad })
    }

    /// `Σ x ⊙ w` for a constant `w`.
    pub fn dot_const(&mut self, x: Var, w: Tensor<T>) -> Var {
        let v = self.value(x).data.iter().zip(&w.data).map(|(a, b)| *a * *b).sum::<T>();
        self.push(Tensor::scalar(v), Op::Loss { x, grad: w })
    }

    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let total = parts.iter().map(|p| self.value(*p).data[0]).sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum(parts))
    }

    /// Gradients of scalar `loss` with respect to every node; `None` where
    /// the loss does not depend on the node.
    pub fn backward(&self, loss: Var) -> Vec<Option<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = matmul_bt(&g, self.value(*b));
                    let gb = matmul_at(self.value(*a), &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in gr.data.iter_mut().zip(g.row(r)) {
                            *x += *y;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, c) => {
                    let mut ga = g.clone();
                    for x in &mut ga.data {
                        *x *= *c;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let mut ga = g.clone();
                    for (gx, x) in ga.data.iter_mut().zip(&xv.data) {
                        *gx *= gelu_grad(*x);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (n, m) = (g.rows, g.cols);
                    let gv = &self.value(*gain).data;
                    let mut gx = Tensor::zeros(n, m);
                    let mut gg = Tensor::zeros(1, m);
                    let mut gb = Tensor::zeros(1, m);
                    let mf = T::of(m as f64);
                    let mut dxhat = vec![T::zero(); m];
                    for r in 0..n {
                        let gr = g.row(r);
                        let xh = &xhat[r * m..(r + 1) * m];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..m {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                            gg.data[j] += gr[j] * xh[j];
                            gb.data[j] += gr[j];
                        }
                        mean_d /= mf;
                        mean_dx /= mf;
                        let out = gx.row_mut(r);
                        for j in 0..m {
                            out[j] = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Embed { table, groups } => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for r in 0..groups.rows() {
                        let gr = g.row(r);
                        for k in groups.offsets[r]..groups.offsets[r + 1] {
                            let w = groups.weights[k];
                            for (o, x) in gt.row_mut(groups.indices[k] as usize).iter_mut().zip(gr) {
                                *o += *x * w;
                            }
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = r {
                            for (o, y) in gx.row_mut(*r).iter_mut().zip(g.row(i)) {
                                *o += *y;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let (gq, gk, gv) = self.attention_backward(&g, *q, *k, *v, *shape, probs);
                    accumulate(&mut grads, *v, gv);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *q, gq);
                }
                Op::Loss { x, grad } => {
                    let mut gx = grad.clone();
                    let s = g.data[0];
                    for v in &mut gx.data {
                        *v *= s;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(parts) => {
                    for p in parts.iter().rev() {
                        accumulate(&mut grads, *p, g.clone());
                    }
                }
            }
            grads[i] = Some(g);
        }
        grads
    }

    fn attention_backward(
        &self,
        g: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &[T],
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        let AttentionShape {
            n_seq,
            seq_len: l,
            heads,
            ..
        } = shape;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut gq = Tensor::zeros(qv.rows, d);
        let mut gk = Tensor::zeros(kv.rows, d);
        let mut gv = Tensor::zeros(vv.rows, d);
        let mut dp = vec![T::zero(); l];
        for s in 0..n_seq {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..l {
                    let p = &probs[((s * heads + h) * l + i) * l..((s * heads + h) * l + i + 1) * l];
                    let go = &g.row(s * l + i)[c0..c0 + dh];
                    let mut dot_pd = T::zero();
                    for j in 0..l {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vv.row(s * l + j)[c0..c0 + dh];
                        let mut acc = T::zero();
                        for (a, b) in go.iter().zip(vj) {
                            acc += *a * *b;
                        }
                        dp[j] = acc;
                        dot_pd += acc * p[j];
                        let gvj = &mut gv.data[(s * l + j) * d + c0..(s * l + j) * d + c0 + dh];
                        for (o, x) in gvj.iter_mut().zip(go) {
                            *o += p[j] * *x;
                        }
                    }
                    for j in 0..l {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot_pd) * scale;
                        let qi = qv.row(s * l + i)[c0..c0 + dh].to_vec();
                        let kj = kv.row(s * l + j)[c0..c0 + dh].to_vec();
                        let gqi = &mut gq.data[(s * l + i) * d + c0..(s * l + i) * d + c0 + dh];
                        for (o, x) in gqi.iter_mut().zip(&kj) {
                            *o += ds * *x;
                        }
                        let gkj = &mut gk.data[(s * l + j) * d + c0..(s * l + j) * d + c0 + dh];
                        for (o, x) in gkj.iter_mut().zip(&qi) {
                            *o += ds * *x;
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub fn clamp_log_scale<T: Scalar>(s: T) -> (T, bool) {
    let (lo, hi) = (T::of(LOG_SCALE_MIN), T::of(LOG_SCALE_MAX));
    if s < lo {
        (lo, false)
    } else if s > hi {
        (hi, false)
    } else {
        (s, true)
    }
}

pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|x| (*x - m).exp()).sum::<T>().ln()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    T::of(0.5) * (T::one() + t)
        + T::of(0.5) * x * (T::one() - t * t) * T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data[i] += 1e-5;
            b.data[i] -= 1e-5;
            g.data[i] = (f(&a) - f(&b)) / 2e-5;
        }
        g
    }

    fn close(a: &Tensor<f64>, b: &Tensor<f64>) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6 * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        let x = Tensor::from_vec(3, 4, pseudo(12, 1));
        let gain = Tensor::from_vec(1, 4, pseudo(4, 2));
        let w = Tensor::from_vec(3, 4, pseudo(12, 3));
        let f = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let g = t.leaf(gain.clone());
            let b = t.leaf(Tensor::zeros(1, 4));
            let y = t.layer_norm(xv, g, b);
            let y = t.gelu(y);
            t.value(y).data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let g = t.leaf(gain.clone());
        let b = t.leaf(Tensor::zeros(1, 4));
        let y = t.layer_norm(xv, g, b);
        let y = t.gelu(y);
        let loss = t.dot_const(y, w.clone());
        let grads = t.backward(loss);
        close(grads[xv.0].as_ref().unwrap(), &numeric_grad(&f, &x));
    }

    #[test]
    fn attention_gradient() {
        let shape = AttentionShape {
            n_seq: 2,
            seq_len: 3,
            heads: 2,
            causal: true,
        };
        let mask = [true, true, false, true, true, true];
        let q = Tensor::from_vec(6, 4, pseudo(24, 4));
        let k = Tensor::from_vec(6, 4, pseudo(24, 5));
        let v = Tensor::from_vec(6, 4, pseudo(24, 6));
        let w = Tensor::from_vec(6, 4, pseudo(24, 7));
        let run = |qq: &Tensor<f64>, which: usize| {
            let mut t = Tape::new();
            let a = t.leaf(if which == 0 { qq.clone() } else { q.clone() });
            let b = t.leaf(if which == 1 { qq.clone() } else { k.clone() });
            let c = t.leaf(if which == 2 { qq.clone() } else { v.clone() });
            let o = t.attention(a, b, c, shape, Some(&mask));
            let loss = t.dot_const(o, w.clone());
            let g = t.backward(loss);
            (t.value(loss).data[0], [a, b, c].map(|v| g[v.0].clone().unwrap()))
        };
        for which in 0..3 {
            let base = [&q, &k, &v][which];
            let analytic = run(base, which).1[which].clone();
            let numeric = numeric_grad(&|x| run(x, which).0, base);
            close(&analytic, &numeric);
        }
    }

    #[test]
    fn loss_gradients() {
        let x = Tensor::from_vec(2, 6, pseudo(12, 8));
        let f = |x: &Tensor<f64>, which: usize| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let l = match which {
                0 => t.categorical_nll(v, &[(0, 2), (1, 5), (1, 0)]),
                1 => t.numeric_nll(
                    v,
                    &[
                        NumericTarget {
                            row: 0,
                            presence_col: 0,
                            mean_col: 1,
                            log_scale_col: 2,
                            present: true,
                            value: Some(0.7),
                        },
                        NumericTarget {
                            row: 1,
                            presence_col: 3,
                            mean_col: 4,
                            log_scale_col: 5,
                            present: false,
                            value: None,
                        },
                    ],
                ),
                _ => t.tte_nll(v, 2, &[(0, 3.0), (1, 0.4)]),
            };
            let g = t.backward(l);
            (t.value(l).data[0], g[v.0].clone().unwrap())
        };
        for which in 0..3 {
            close(&f(&x, which).1, &numeric_grad(&|y| f(y, which).0, &x));
        }
    }

    #[test]
    fn single_lognormal_nll() {
        // K=1, Δt = e^μ: −log p = log Δt + log σ + 0.5 log 2π.
        let (mu, s) = (2.0f64, 0.3f64);
        let mut t = Tape::new();
        let v = t.leaf(Tensor::from_vec(1, 3, vec![0.0, mu, s]));
        let l = t.tte_nll(v, 1, &[(0, mu.exp())]);
        let expected = mu + s + 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((t.value(l).data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn certain_class_costs_nothing() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::from_vec(1, 3, vec![0.0, 800.0, 0.0]));
        let l = t.categorical_nll(v, &[(0, 1)]);
        assert_eq!(t.value(l).data[0], 0.0);
        let mut t = Tape::new();
        let v = t.leaf(Tensor::<f64>::zeros(1, 4));
        let l = t.categorical_nll(v, &[(0, 1)]);
        assert!((t.value(l).data[0] - 4f64.ln()).abs() < 1e-12);
    }
}
