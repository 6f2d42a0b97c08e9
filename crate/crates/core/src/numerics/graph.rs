//! Eager tape for reverse-mode differentiation.
//!
//! Every op computes its value when it is recorded; `backward` walks the tape
//! in reverse. Only parameter gradients are returned: anything that should be
//! differentiated has to live in a [`ParamStore`].

use std::collections::HashMap;

use super::kernels::{axpy, dot, gemm, log_sum_exp};
use super::{ParamGrads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// `eps` inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A contiguous block of rows that attends only to itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    RowSum(NodeId),
    Sum(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Dot(NodeId, NodeId),
    NormalizeRows { x: NodeId, norms: Vec<f64> },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let value = self.params.value(id).clone();
        let n = self.push(value, Op::Param(id), true);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let id = self.params.require(name)?;
        Ok(self.param(id))
    }

    /// Same value, gradient flow severed.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.input(value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.require_2d("matmul")?;
        let (br, bc) = tb.require_2d("matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Broadcast a `[1, c]` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(row));
        let (r, c) = ta.require_2d("add_row")?;
        if tb.shape() != [1, c] {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for (x, y) in data[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same extent");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Scale row `i` of `a` by `col[i]` (`col` is `[r, 1]`).
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (r, c) = ta.require_2d("mul_col")?;
        if tc.shape() != [r, 1] {
            return Err(mismatch("mul_col", ta, tc));
        }
        let mut data = ta.data().to_vec();
        for i in 0..r {
            let s = tc.data()[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= s);
        }
        let value = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    /// `[r, c] -> [r, 1]`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let (r, _) = ta.require_2d("row_sum")?;
        let data = (0..r).map(|i| ta.row(i).iter().sum()).collect();
        let value = Tensor::new(vec![r, 1], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowSum(a), rg))
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = self.value(x);
        let (r, c) = tx.require_2d("softmax")?;
        if axis > 1 {
            return Err(Error::invalid(format!("softmax axis {axis} on a matrix")));
        }
        let extent = if axis == 1 { c } else { r };
        if extent == 0 {
            return Err(Error::EmptyAxis {
                axis,
                shape: tx.shape().to_vec(),
            });
        }
        let mut out = tx.data().to_vec();
        let (lanes, stride_lane, stride_elem) = if axis == 1 { (r, c, 1) } else { (c, 1, c) };
        for lane in 0..lanes {
            let base = lane * stride_lane;
            let idx = |j: usize| base + j * stride_elem;
            let max = (0..extent).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..extent {
                let e = (out[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..extent {
                out[idx(j)] /= total;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Row-wise layer normalisation followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let (r, c) = tx.require_2d("layer_norm")?;
        for t in [self.value(gain), self.value(bias)] {
            if t.shape() != [1, c] {
                return Err(mismatch("layer_norm", tx, t));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                normed[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same extent");
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Rows of `table` selected by `ids`; doubles as embedding lookup.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = self.value(table);
        let (r, c) = tt.require_2d("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::OutOfRange {
                    what: "gather row",
                    index: id,
                    len: r,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.gather_rows(table, ids)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let c = self.value(*first).require_2d("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = t.require_2d("concat_rows")?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += pr;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let r = self.value(*first).require_2d("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = t.require_2d("concat_cols")?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over rows of `-log softmax(logits_i)[target_i]`.
    ///
    /// `-inf` logits are excluded classes. Zero rows give a loss of 0.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let tl = self.value(logits);
        let (r, c) = tl.require_2d("cross_entropy")?;
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::OutOfRange {
                    what: "target class",
                    index: t,
                    len: c,
                });
            }
            let row = tl.row(i);
            let lse = log_sum_exp(row);
            if !row[t].is_finite() || !lse.is_finite() {
                return Err(Error::NonFinite(format!(
                    "cross_entropy row {i} (target logit {}, lse {lse})",
                    row[t]
                )));
            }
            total += lse - row[t];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = if r == 0 { 0.0 } else { total / r as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("dot", ta, tb));
        }
        let v = dot(ta.data(), tb.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), rg))
    }

    /// Scale every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let (r, c) = tx.require_2d("normalize_rows")?;
        let mut norms = Vec::with_capacity(r);
        let mut data = tx.data().to_vec();
        for i in 0..r {
            let n = dot(tx.row(i), tx.row(i)).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::NonFinite(format!("row norm {n} in normalize_rows")));
            }
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    /// Multi-head scaled dot-product self-attention inside each segment.
    ///
    /// `q`, `k`, `v` are `[rows, d]` projections; heads split the columns.
    /// Rows outside every segment produce zeros.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
    ) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.require_2d("attention")?;
        if tk.shape() != tq.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        if tv.shape() != tq.shape() {
            return Err(mismatch("attention", tq, tv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide width {d}")));
        }
        for s in segments {
            if s.start + s.len > rows {
                return Err(Error::OutOfRange {
                    what: "attention segment end",
                    index: s.start + s.len,
                    len: rows,
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(total);
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = Vec::new();
        for s in segments {
            let t = s.len;
            for h in 0..heads {
                let off = h * dh;
                scores.clear();
                for i in 0..t {
                    let qi = &qd[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    for j in 0..t {
                        let kj = &kd[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        scores.push(dot(qi, kj) * scale);
                    }
                }
                for i in 0..t {
                    let row = &mut scores[i * t..(i + 1) * t];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                    let o = &mut out[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    for j in 0..t {
                        let vj = &vd[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        axpy(row[j], vj, o);
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// reached it.
    pub fn backward(&self, loss: NodeId) -> Result<ParamGrads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward from non-scalar of shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = ParamGrads::default();

        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => out.entries.push((*pid, up)),
                Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = up.cols();
                    if self.rg(*a) {
                        // dA = dC · B'ᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, up.data(), false, tb.data(), !trans_b, 0.0, &mut da);
                        self.acc(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dCᵀ · A
                            gemm(n, m, k, up.data(), true, ta.data(), false, 0.0, &mut db);
                            self.acc(&mut grads, *b, Tensor::new(vec![n, k], db)?);
                        } else {
                            gemm(k, m, n, ta.data(), true, up.data(), false, 0.0, &mut db);
                            self.acc(&mut grads, *b, Tensor::new(vec![k, n], db)?);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, up.clone());
                    }
                    self.acc(&mut grads, *a, up);
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let c = up.cols();
                        let mut db = vec![0.0; c];
                        for r in 0..up.rows() {
                            axpy(1.0, up.row(r), &mut db);
                        }
                        self.acc(&mut grads, *row, Tensor::new(vec![1, c], db)?);
                    }
                    self.acc(&mut grads, *a, up);
                }
                Op::Scale(a, f) => {
                    let data = up.data().iter().map(|x| x * f).collect();
                    self.acc(&mut grads, *a, Tensor::new(up.shape().to_vec(), data)?);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let d = up.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                        self.acc(&mut grads, *a, Tensor::new(up.shape().to_vec(), d)?);
                    }
                    if self.rg(*b) {
                        let d = up.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                        self.acc(&mut grads, *b, Tensor::new(up.shape().to_vec(), d)?);
                    }
                }
                Op::MulCol(a, col) => {
                    let (ta, tc) = (self.value(*a), self.value(*col));
                    let (r, c) = (ta.rows(), ta.cols());
                    if self.rg(*a) {
                        let mut d = up.data().to_vec();
                        for i in 0..r {
                            let s = tc.data()[i];
                            d[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= s);
                        }
                        self.acc(&mut grads, *a, Tensor::new(vec![r, c], d)?);
                    }
                    if self.rg(*col) {
                        let d = (0..r).map(|i| dot(up.row(i), ta.row(i))).collect();
                        self.acc(&mut grads, *col, Tensor::new(vec![r, 1], d)?);
                    }
                }
                Op::RowSum(a) => {
                    let ta = self.value(*a);
                    let (r, c) = (ta.rows(), ta.cols());
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c..(i + 1) * c].fill(up.data()[i]);
                    }
                    self.acc(&mut grads, *a, Tensor::new(vec![r, c], d)?);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    self.acc(&mut grads, *a, Tensor::full(&shape, up.item()));
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut d = vec![0.0; r * c];
                    let (lanes, extent, sl, se) = if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                    for lane in 0..lanes {
                        let idx = |j: usize| lane * sl + j * se;
                        let s: f64 = (0..extent).map(|j| up.data()[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..extent {
                            d[idx(j)] = y.data()[idx(j)] * (up.data()[idx(j)] - s);
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(vec![r, c], d)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let g = self.value(*gain).data();
                    let (r, c) = (up.rows(), up.cols());
                    if self.rg(*gain) {
                        let mut dg = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                dg[j] += up.data()[i * c + j] * normed[i * c + j];
                            }
                        }
                        self.acc(&mut grads, *gain, Tensor::new(vec![1, c], dg)?);
                    }
                    if self.rg(*bias) {
                        let mut db = vec![0.0; c];
                        for i in 0..r {
                            axpy(1.0, up.row(i), &mut db);
                        }
                        self.acc(&mut grads, *bias, Tensor::new(vec![1, c], db)?);
                    }
                    if self.rg(*x) {
                        let mut dx = vec![0.0; r * c];
                        let mut dxh = vec![0.0; c];
                        for i in 0..r {
                            let xh = &normed[i * c..(i + 1) * c];
                            for j in 0..c {
                                dxh[j] = up.data()[i * c + j] * g[j];
                            }
                            let mean_d = dxh.iter().sum::<f64>() / c as f64;
                            let mean_dx = dot(&dxh, xh) / c as f64;
                            for j in 0..c {
                                dx[i * c + j] = inv_std[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                        self.acc(&mut grads, *x, Tensor::new(vec![r, c], dx)?);
                    }
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    let d = tx
                        .data()
                        .iter()
                        .zip(up.data())
                        .map(|(&v, g)| g * gelu_grad(v))
                        .collect();
                    self.acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
                }
                Op::Gather { table, ids } => {
                    let tt = self.value(*table);
                    let c = tt.cols();
                    let mut d = Tensor::zeros(tt.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, up.row(r), d.row_mut(id));
                    }
                    debug_assert_eq!(d.cols(), c);
                    self.acc(&mut grads, *table, d);
                }
                Op::ConcatRows(parts) => {
                    let c = up.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pr = self.value(p).rows();
                        if self.rg(p) {
                            let d = up.data()[offset * c..(offset + pr) * c].to_vec();
                            self.acc(&mut grads, p, Tensor::new(vec![pr, c], d)?);
                        }
                        offset += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let r = up.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        if self.rg(p) {
                            let mut d = Vec::with_capacity(r * pc);
                            for i in 0..r {
                                d.extend_from_slice(&up.row(i)[offset..offset + pc]);
                            }
                            self.acc(&mut grads, p, Tensor::new(vec![r, pc], d)?);
                        }
                        offset += pc;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let r = targets.len();
                    if r > 0 {
                        let c = probs.len() / r;
                        let s = up.item() / r as f64;
                        let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                        for (i, &t) in targets.iter().enumerate() {
                            d[i * c + t] -= s;
                        }
                        self.acc(&mut grads, *logits, Tensor::new(vec![r, c], d)?);
                    }
                }
                Op::Dot(a, b) => {
                    let s = up.item();
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let d = tb.data().iter().map(|y| y * s).collect();
                        self.acc(&mut grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                    }
                    if self.rg(*b) {
                        let d = ta.data().iter().map(|x| x * s).collect();
                        self.acc(&mut grads, *b, Tensor::new(tb.shape().to_vec(), d)?);
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let yi = y.row(i);
                        let gi = up.row(i);
                        let proj = dot(yi, gi);
                        for j in 0..c {
                            d[i * c + j] = (gi[j] - yi[j] * proj) / norms[i];
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(vec![r, c], d)?);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = (tq.rows(), tq.cols());
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qd, kd, vd, gd) = (tq.data(), tk.data(), tv.data(), up.data());
                    let mut dq = vec![0.0; rows * d];
                    let mut dk = vec![0.0; rows * d];
                    let mut dv = vec![0.0; rows * d];
                    let mut cursor = 0;
                    let mut dp = Vec::new();
                    for s in segments {
                        let t = s.len;
                        for h in 0..*heads {
                            let off = h * dh;
                            let p = &probs[cursor..cursor + t * t];
                            cursor += t * t;
                            let at = |row: usize| (s.start + row) * d + off..(s.start + row) * d + off + dh;
                            // dP = dO · Vᵀ ; dV = Pᵀ · dO
                            dp.clear();
                            for i in 0..t {
                                let go = &gd[at(i)];
                                for j in 0..t {
                                    dp.push(dot(go, &vd[at(j)]));
                                    let pij = p[i * t + j];
                                    axpy(pij, go, &mut dv[at(j)]);
                                }
                            }
                            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then through the scaled QKᵀ
                            for i in 0..t {
                                let row_p = &p[i * t..(i + 1) * t];
                                let row_dp = &dp[i * t..(i + 1) * t];
                                let inner = dot(row_p, row_dp);
                                for j in 0..t {
                                    let ds = row_p[j] * (row_dp[j] - inner) * scale;
                                    if ds != 0.0 {
                                        axpy(ds, &kd[at(j)], &mut dq[at(i)]);
                                        axpy(ds, &qd[at(i)], &mut dk[at(j)]);
                                    }
                                }
                            }
                        }
                    }
                    let shape = vec![rows, d];
                    if self.rg(*q) {
                        self.acc(&mut grads, *q, Tensor::new(shape.clone(), dq)?);
                    }
                    if self.rg(*k) {
                        self.acc(&mut grads, *k, Tensor::new(shape.clone(), dk)?);
                    }
                    if self.rg(*v) {
                        self.acc(&mut grads, *v, Tensor::new(shape, dv)?);
                    }
                }
            }
        }
        out.entries.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
