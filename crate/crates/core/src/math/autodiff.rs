//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! one gradient per node that depends on a trainable leaf. Constants are
//! recorded with [`Graph::constant`] and never receive gradients, which is how
//! discrete choices (sampled tokens, permutations) stay outside
//! differentiation.
//!
//! Sequences are packed row-wise: a batch of sequences is a single `N x d`
//! matrix, and ops that care about sequence boundaries (attention, pooling)
//! take the list of row spans explicitly.

use std::ops::Range;

use super::array::{dot, gemm_a_bt_acc, gemm_at_b_acc, NumericArray};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One supervised row for [`Graph::softmax_cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeTarget {
    pub row: usize,
    pub class: usize,
    pub weight: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    GroupMean {
        x: Var,
        groups: Vec<Range<usize>>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        spans: Vec<Range<usize>>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<CeTarget>,
        probs: Vec<Vec<f64>>,
    },
    SquaredError {
        pred: Var,
        targets: Vec<(usize, f64)>,
    },
    Mean(Var),
    LogMeanExp {
        x: Var,
        softmax: Vec<f64>,
    },
    /// Scalar function of two scalar nodes with partials fixed at evaluation time.
    Binary {
        a: Var,
        b: Var,
        da: f64,
        db: f64,
    },
}

struct Node {
    value: NumericArray,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node. Nodes that do not depend on a trainable leaf
/// have no entry.
pub struct Gradients {
    grads: Vec<Option<NumericArray>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&NumericArray> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<NumericArray> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, a: &NumericArray, b: &NumericArray) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    let t = gelu_tanh(x);
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

/// GELU and its derivative from one tanh evaluation.
pub(crate) fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = gelu_tanh(x);
    let value = 0.5 * x * (1.0 + t);
    let grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (value, grad)
}

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `log Σ exp(x)` without overflow.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NumericArray, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &NumericArray {
        &self.nodes[v.0].value
    }

    /// A trainable input; receives a gradient.
    pub fn leaf(&mut self, value: NumericArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; never receives a gradient.
    pub fn constant(&mut self, value: NumericArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(row));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(dim_err("add_row", av, bv));
        }
        let mut value = av.clone();
        for r in 0..av.rows() {
            value.row_mut(r).iter_mut().zip(bv.data()).for_each(|(x, b)| *x += b);
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with a learned `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        for p in [gain, bias] {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != c {
                return Err(dim_err("layer_norm", xv, pv));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            NumericArray::from_parts(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rows `ids[i]` of `table`, stacked.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let c = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= tv.rows() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: tv.rows(),
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            NumericArray::from_parts(ids.len(), c, out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::Dimension {
                op: "select_rows",
                left: xv.shape().to_vec(),
                right: vec![bad],
            });
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(xv.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(
            NumericArray::from_parts(rows.len(), c, out),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Column-wise mean over each row range; one output row per group.
    pub fn group_mean(&mut self, x: Var, groups: &[Range<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; groups.len() * c];
        for (g, range) in groups.iter().enumerate() {
            if range.is_empty() || range.end > xv.rows() {
                return Err(Error::Empty("group_mean range"));
            }
            let n = range.len() as f64;
            let dst = &mut out[g * c..(g + 1) * c];
            for r in range.clone() {
                dst.iter_mut().zip(xv.row(r)).for_each(|(o, v)| *o += v);
            }
            dst.iter_mut().for_each(|o| *o /= n);
        }
        let rg = self.rg(x);
        Ok(self.push(
            NumericArray::from_parts(groups.len(), c, out),
            Op::GroupMean {
                x,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `N x d`; each span is one sequence and rows only
    /// attend to earlier-or-equal rows of the same span.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[Range<usize>],
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(dim_err("causal_attention", qv, kv));
        }
        let (n, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} columns cannot split into {heads} heads")));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(spans.len() * heads);
        for span in spans {
            if span.end > n {
                return Err(Error::Empty("attention span out of range"));
            }
            let len = span.len();
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let mut p = vec![0.0; len * len];
                for t in 0..len {
                    let qt = &qv.row(span.start + t)[cols.clone()];
                    let scores: Vec<f64> = (0..=t)
                        .map(|j| dot(qt, &kv.row(span.start + j)[cols.clone()]) * scale)
                        .collect();
                    let w = softmax(&scores);
                    let dst = &mut out[(span.start + t) * d + cols.start..(span.start + t) * d + cols.end];
                    for (j, &wj) in w.iter().enumerate() {
                        let vj = &vv.row(span.start + j)[cols.clone()];
                        dst.iter_mut().zip(vj).for_each(|(o, x)| *o += wj * x);
                    }
                    p[t * len..t * len + t + 1].copy_from_slice(&w);
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            NumericArray::from_parts(n, d, out),
            Op::CausalAttention {
                q,
                k,
                v,
                spans: spans.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// `Σ weight · (−log softmax(logits[row])[class])` over the targets, as a 1x1 node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[CeTarget]) -> Result<Var> {
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for t in targets {
            if t.row >= lv.rows() || t.class >= lv.cols() {
                return Err(Error::Dimension {
                    op: "softmax_cross_entropy",
                    left: lv.shape().to_vec(),
                    right: vec![t.row, t.class],
                });
            }
            let row = lv.row(t.row);
            total += t.weight * (log_sum_exp(row) - row[t.class]);
            probs.push(softmax(row));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            NumericArray::scalar(total),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of `(pred[row, 0] − target)²` over the targets, as a 1x1 node.
    pub fn squared_error(&mut self, pred: Var, targets: &[(usize, f64)]) -> Result<Var> {
        let pv = self.value(pred);
        if targets.is_empty() {
            return Err(Error::Empty("squared_error targets"));
        }
        let mut total = 0.0;
        for &(r, y) in targets {
            if r >= pv.rows() {
                return Err(Error::Dimension {
                    op: "squared_error",
                    left: pv.shape().to_vec(),
                    right: vec![r],
                });
            }
            let e = pv.row(r)[0] - y;
            total += e * e;
        }
        let rg = self.rg(pred);
        Ok(self.push(
            NumericArray::scalar(total / targets.len() as f64),
            Op::SquaredError {
                pred,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over all entries, as a 1x1 node.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(NumericArray::scalar(m), Op::Mean(x), rg)
    }

    /// `log mean exp` over all entries, as a 1x1 node.
    pub fn log_mean_exp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = log_sum_exp(xv.data()) - (xv.len() as f64).ln();
        let softmax = softmax(xv.data());
        let rg = self.rg(x);
        self.push(NumericArray::scalar(value), Op::LogMeanExp { x, softmax }, rg)
    }

    /// Records `f(a, b)` for scalar nodes, given its value and partials.
    pub fn binary_scalar(&mut self, a: Var, b: Var, value: f64, da: f64, db: f64) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(NumericArray::scalar(value), Op::Binary { a, b, da, db }, rg)
    }

    /// Reverse pass from a 1x1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                left: lv.shape().to_vec(),
                right: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: grads.into_iter().map(|_| None).collect(),
            });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|data| {
                    NumericArray::new(node.value.shape().to_vec(), data)
                        .expect("gradient shape matches its node")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_a_bt_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_at_b_acc(av.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let c = self.value(*row).cols();
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), &inp) in ga.iter_mut().zip(g).zip(av.data()) {
                        *x += y * gelu_grad(inp);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gain).cols();
                let gv = self.value(*gain).data().to_vec();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n = c as f64;
                    for (i, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let dst = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] += inv_std[i] / n * (n * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = self.value(*table).cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * c..(id + 1) * c];
                        dst.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut gx[r * c..(r + 1) * c];
                        dst.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::GroupMean { x, groups } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (gi, range) in groups.iter().enumerate() {
                        let n = range.len() as f64;
                        let src = &g[gi * c..(gi + 1) * c];
                        for r in range.clone() {
                            let dst = &mut gx[r * c..(r + 1) * c];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y / n);
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, spans, *heads, probs, g, grads),
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (t, p) in targets.iter().zip(probs) {
                        let dst = &mut gl[t.row * c..(t.row + 1) * c];
                        let w = g[0] * t.weight;
                        for j in 0..c {
                            let onehot = if j == t.class { 1.0 } else { 0.0 };
                            dst[j] += w * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::SquaredError { pred, targets } => {
                let pv = self.value(*pred);
                let c = pv.cols();
                let n = targets.len() as f64;
                if let Some(gp) = self.acc(grads, *pred) {
                    for &(r, y) in targets {
                        gp[r * c] += g[0] * 2.0 * (pv.row(r)[0] - y) / n;
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::LogMeanExp { x, softmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(softmax).for_each(|(v, s)| *v += g[0] * s);
                }
            }
            Op::Binary { a, b, da, db } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga[0] += g[0] * da;
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb[0] += g[0] * db;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[Range<usize>],
        heads: usize,
        probs: &[Vec<f64>],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut pi = 0;
        for span in spans {
            let len = span.len();
            for h in 0..heads {
                let p = &probs[pi];
                pi += 1;
                let c0 = h * hd;
                for t in 0..len {
                    let rt = span.start + t;
                    let gt = &g[rt * d + c0..rt * d + c0 + hd];
                    let pt = &p[t * len..t * len + t + 1];
                    let mut dp = vec![0.0; t + 1];
                    for j in 0..=t {
                        let rj = span.start + j;
                        dp[j] = dot(gt, &vv.data()[rj * d + c0..rj * d + c0 + hd]);
                        let dst = &mut dv[rj * d + c0..rj * d + c0 + hd];
                        dst.iter_mut().zip(gt).for_each(|(x, y)| *x += pt[j] * y);
                    }
                    let s: f64 = pt.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..=t {
                        let ds = pt[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let rj = span.start + j;
                        for c in 0..hd {
                            dq[rt * d + c0 + c] += ds * kv.data()[rj * d + c0 + c];
                            dk[rj * d + c0 + c] += ds * qv.data()[rt * d + c0 + c];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gx) = self.acc(grads, var) {
                gx.iter_mut().zip(&delta).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// `y = x W + b` for packed rows.
pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    match bias {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}
