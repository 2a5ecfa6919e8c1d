//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward computation. Leaves are
//! either trainable parameters (tagged with their index in the model's
//! parameter list) or constants. [`Tape::backward`] walks the tape in reverse
//! and returns exact partial derivatives of a scalar with respect to every
//! parameter leaf.

use std::borrow::Cow;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm(Var),
    Gelu(Var),
    MeanRows(Var),
    Cosine(Var, Var),
    Stack(Vec<Var>),
    Jsd(Var, Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    Sum(Vec<Var>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    param: Option<usize>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// One recorded forward computation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to parameter leaves, indexed by the
/// parameter index given to [`Tape::param`].
#[derive(Debug, Clone)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    /// Gradient of parameter `i`, materializing zeros when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, i: usize, shape: (usize, usize)) -> Tensor {
        self.0
            .get(i)
            .and_then(Clone::clone)
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Trainable leaf for parameter `index`.
    pub fn param(&mut self, index: usize, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            param: Some(index),
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf borrowed from the caller.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `a + b` with the `1×c` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        let mut out = self.value(a).clone();
        assert_eq!(bias.shape(), (1, out.cols), "add_row shape");
        for r in 0..out.rows {
            for (o, v) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    /// Elementwise `a * w` with the `1×c` row `w` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, w: Var) -> Var {
        let gain = self.value(w);
        let mut out = self.value(a).clone();
        assert_eq!(gain.shape(), (1, out.cols), "mul_row shape");
        for r in 0..out.rows {
            for (o, v) in out.row_mut(r).iter_mut().zip(&gain.data) {
                *o *= v;
            }
        }
        self.push(out, Op::MulRow(a, w))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    /// Rows `indices` of `src`, in order (repeats allowed).
    pub fn gather(&mut self, src: Var, indices: &[usize]) -> Var {
        let s = self.value(src);
        let mut out = Tensor::zeros(indices.len(), s.cols);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        self.push(out, Op::Gather(src, indices.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let s = self.value(a);
        let mut out = Tensor::zeros(s.rows, width);
        for r in 0..s.rows {
            out.row_mut(r)
                .copy_from_slice(&s.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for p in parts {
                let v = self.value(*p);
                out.row_mut(r)[c0..c0 + v.cols].copy_from_slice(v.row(r));
                c0 += v.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = self.value(a);
        let mut out = Tensor::zeros(s.rows, s.cols);
        for r in 0..s.rows {
            out.row_mut(r).copy_from_slice(&tensor::softmax(s.row(r)));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let s = self.value(a);
        let mut out = Tensor::zeros(s.rows, s.cols);
        for r in 0..s.rows {
            let (mean, inv) = row_stats(s.row(r));
            for (o, x) in out.row_mut(r).iter_mut().zip(s.row(r)) {
                *o = (x - mean) * inv;
            }
        }
        self.push(out, Op::LayerNorm(a))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| {
            let u = GELU_C * (*x + GELU_A * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        });
        self.push(out, Op::Gelu(a))
    }

    /// Column means, `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        self.push(out, Op::MeanRows(a))
    }

    /// Cosine similarity of two `1×c` rows.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = tensor::cosine(&self.value(a).data, &self.value(b).data)
            .ok_or_else(|| Error::Numeric("cosine of a zero-norm representation".into()))?;
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b)))
    }

    /// Scalars to a `1×n` row.
    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let data = scalars.iter().map(|s| self.scalar(*s)).collect();
        self.push(Tensor::row_vector(data), Op::Stack(scalars.to_vec()))
    }

    /// Jensen-Shannon divergence (natural log) of two `1×n` distributions.
    pub fn jsd(&mut self, p: Var, q: Var) -> Var {
        let v = jsd_value(&self.value(p).data, &self.value(q).data);
        self.push(Tensor::scalar(v), Op::Jsd(p, q))
    }

    /// Mean of squared entrywise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mse shape");
        let sum: f64 = x.data.iter().zip(&y.data).map(|(u, v)| (u - v) * (u - v)).sum();
        let v = sum / x.len() as f64;
        self.push(Tensor::scalar(v), Op::Mse(a, b))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per logit row");
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -tensor::log_softmax(l.row(r))[t])
            .sum();
        let v = total / targets.len() as f64;
        self.push(Tensor::scalar(v), Op::CrossEntropy(logits, targets.to_vec()))
    }

    /// Sum of scalars.
    pub fn sum(&mut self, scalars: &[Var]) -> Var {
        let v = scalars.iter().map(|s| self.scalar(*s)).sum();
        self.push(Tensor::scalar(v), Op::Sum(scalars.to_vec()))
    }

    /// Exact gradients of the scalar `loss` with respect to every parameter
    /// leaf; `n_params` sizes the result.
    pub fn backward(&self, loss: Var, n_params: usize) -> Result<ParamGrads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Numeric("backward from a non-scalar".into()));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at tape node {id}"
                )));
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(p) = node.param {
                        accumulate(&mut out[p], g);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads[b.0], g.col_sums());
                    accumulate(&mut grads[a.0], g);
                }
                Op::MulRow(a, w) => {
                    let x = self.value(*a);
                    let gain = self.value(*w);
                    let mut ga = g.clone();
                    let mut gw = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xr = x.row(r);
                        for c in 0..g.cols {
                            gw.data[c] += gr[c] * xr[c];
                        }
                        for (v, s) in ga.row_mut(r).iter_mut().zip(&gain.data) {
                            *v *= s;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Gather(src, indices) => {
                    let s = self.value(*src);
                    let mut gs = Tensor::zeros(s.rows, s.cols);
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, v) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[src.0], gs);
                }
                Op::SliceCols(a, start) => {
                    let s = self.value(*a);
                    let mut ga = Tensor::zeros(s.rows, s.cols);
                    for r in 0..s.rows {
                        ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        let mut gp = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        c0 += w;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = tensor::dot(yr, gr);
                        for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = g.cols as f64;
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (_, inv) = row_stats(x.row(r));
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let g_mean = gr.iter().sum::<f64>() / n;
                        let gy_mean = tensor::dot(gr, yr) / n;
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = inv * (gv - g_mean - yv * gy_mean);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (o, &xv) in ga.data.iter_mut().zip(&x.data) {
                        let u = GELU_C * (xv + GELU_A * xv * xv * xv);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                        *o *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MeanRows(a) => {
                    let s = self.value(*a);
                    let inv = 1.0 / s.rows as f64;
                    let mut ga = Tensor::zeros(s.rows, s.cols);
                    for r in 0..s.rows {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(&g.data) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Cosine(a, b) => {
                    let gv = g.item();
                    let (x, y) = (&self.value(*a).data, &self.value(*b).data);
                    let (nx, ny) = (tensor::norm(x), tensor::norm(y));
                    let c = node.value.item();
                    let ga: Vec<f64> = x
                        .iter()
                        .zip(y)
                        .map(|(xv, yv)| gv * (yv / (nx * ny) - c * xv / (nx * nx)))
                        .collect();
                    let gb: Vec<f64> = x
                        .iter()
                        .zip(y)
                        .map(|(xv, yv)| gv * (xv / (nx * ny) - c * yv / (ny * ny)))
                        .collect();
                    let (ra, rb) = (self.value(*a).rows, self.value(*b).rows);
                    accumulate(&mut grads[a.0], Tensor::from_vec(ra, ga.len() / ra, ga));
                    accumulate(&mut grads[b.0], Tensor::from_vec(rb, gb.len() / rb, gb));
                }
                Op::Stack(parts) => {
                    for (p, &gv) in parts.iter().zip(&g.data) {
                        accumulate(&mut grads[p.0], Tensor::scalar(gv));
                    }
                }
                Op::Jsd(p, q) => {
                    let gv = g.item();
                    let (pv, qv) = (&self.value(*p).data, &self.value(*q).data);
                    let mut gp = Vec::with_capacity(pv.len());
                    let mut gq = Vec::with_capacity(pv.len());
                    for (&a, &b) in pv.iter().zip(qv) {
                        let m = 0.5 * (a + b);
                        gp.push(if a > 0.0 { gv * 0.5 * (a / m).ln() } else { 0.0 });
                        gq.push(if b > 0.0 { gv * 0.5 * (b / m).ln() } else { 0.0 });
                    }
                    accumulate(&mut grads[p.0], Tensor::row_vector(gp));
                    accumulate(&mut grads[q.0], Tensor::row_vector(gq));
                }
                Op::Mse(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let k = 2.0 * g.item() / x.len() as f64;
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for ((o, u), v) in ga.data.iter_mut().zip(&x.data).zip(&y.data) {
                        *o = k * (u - v);
                    }
                    let mut gb = ga.clone();
                    gb.data.iter_mut().for_each(|v| *v = -*v);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::CrossEntropy(logits, targets) => {
                    let l = self.value(*logits);
                    let k = g.item() / targets.len() as f64;
                    let mut gl = Tensor::zeros(l.rows, l.cols);
                    for (r, &t) in targets.iter().enumerate() {
                        let p = tensor::softmax(l.row(r));
                        for (c, (o, pv)) in gl.row_mut(r).iter_mut().zip(p).enumerate() {
                            *o = k * (pv - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut grads[p.0], g.clone());
                    }
                }
            }
        }
        Ok(ParamGrads(out))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Mean and inverse standard deviation of one row.
fn row_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// `0.5·KL(p‖m) + 0.5·KL(q‖m)`, `m = (p+q)/2`, with `0·log 0 = 0`.
pub fn jsd_value(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    total.max(0.0)
}
