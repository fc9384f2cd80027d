//! Tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records every operation during the forward pass and replays
//! the chain rule in reverse on [`Tape::backward`]. Ops validate shapes up
//! front and reject non-finite outputs, so a NaN surfaces at the op that
//! produced it rather than three layers later.
//!
//! Tapes are single-threaded and single-shot: one forward graph, one
//! backward pass, then the tape is consumed. Reductions accumulate in a
//! fixed sequential order, so identical inputs give bit-identical outputs
//! and gradients.

use std::sync::Arc;

use crate::bits::MaskBits;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Embedding { table: Var, ids: Arc<Vec<u32>> },
    Softmax { x: Var },
    RmsNorm { x: Var, weight: Var, inv_rms: Vec<f64> },
    Gelu { x: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    CrossEntropy { logits: Var, targets: Arc<Vec<u32>>, probs: Vec<f64> },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    Mean { x: Var },
    SteMask { theta: Var, scores: Var },
}

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation; see module docs.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. Gradients flow into it iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_node(t.shape().to_vec(), t.data_arc(), t.requires_grad(), Op::Leaf)
    }

    /// Leaf from raw data with no gradient tracking (masks, constants).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Copies a node out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.nodes[v.0].data.to_vec(), &self.nodes[v.0].shape)
            .expect("node data is always finite and shape-consistent")
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Ok(self.push_node(shape, Arc::new(data), requires_grad, op))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_op("matmul", vec![m, n], out, rg, Op::Matmul { a, b })
    }

    /// Elementwise sum; the smaller operand may broadcast if its shape is a
    /// suffix of the larger one (or it is a single element).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let small_is_b = match broadcast_role(&sa, &sb) {
            Some(r) => r,
            None => return Err(Error::ShapeMismatch { op: name, lhs: sa, rhs: sb }),
        };
        let (vb, vs) = if small_is_b {
            (self.value(a), self.value(b))
        } else {
            (self.value(b), self.value(a))
        };
        let chunk = vs.len();
        let mut out = vec![0.0; vb.len()];
        for (ci, ochunk) in out.chunks_mut(chunk).enumerate() {
            let base = ci * chunk;
            for (j, o) in ochunk.iter_mut().enumerate() {
                let (x, y) = if small_is_b {
                    (vb[base + j], vs[j])
                } else {
                    (vs[j], vb[base + j])
                };
                *o = f(x, y);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let out_shape = if small_is_b { sa } else { sb };
        self.push_op(name, out_shape, out, rg, op)
    }

    /// Gathers rows of `table` (`[vocab, d]`) at `ids`, giving `[len(ids), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding",
                shape: st,
                reason: "table must be 2-D".into(),
            });
        }
        let (vocab, d) = (st[0], st[1]);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { op: "embedding", id, vocab });
            }
        }
        let tv = self.value(table);
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.rg(table);
        let ids = Arc::new(ids.to_vec());
        self.push_op("embedding", vec![ids.len(), d], out, rg, Op::Embedding { table, ids })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = *s.last().unwrap_or(&0);
        if last == 0 {
            return Err(Error::InvalidShape { op: "softmax", shape: s, reason: "empty last axis".into() });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (row_out, row_in) in out.chunks_mut(last).zip(xv.chunks(last)) {
            softmax_row(row_in, row_out);
        }
        let rg = self.rg(x);
        self.push_op("softmax", s, out, rg, Op::Softmax { x })
    }

    /// RMS normalization over the last axis with a learned gain:
    /// `y = x / sqrt(mean(x^2) + 1e-6) * weight`.
    pub fn rms_norm(&mut self, x: Var, weight: Var) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let s = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        let last = *s.last().unwrap_or(&0);
        if last == 0 || sw != vec![last] {
            return Err(Error::ShapeMismatch { op: "rms_norm", lhs: s, rhs: sw });
        }
        let (xv, wv) = (self.value(x), self.value(weight));
        let rows = xv.len() / last;
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * last..(r + 1) * last];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / last as f64;
            let inv = 1.0 / (ms + EPS).sqrt();
            inv_rms[r] = inv;
            for j in 0..last {
                out[r * last + j] = row[j] * inv * wv[j];
            }
        }
        let rg = self.rg(x) || self.rg(weight);
        self.push_op("rms_norm", s, out, rg, Op::RmsNorm { x, weight, inv_rms })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let out: Vec<f64> = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let rg = self.rg(x);
        self.push_op("gelu", s, out, rg, Op::Gelu { x })
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape { op: "transpose", shape: s, reason: "must be 2-D".into() });
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let rg = self.rg(x);
        self.push_op("transpose", vec![n, m], out, rg, Op::Transpose { x })
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count {numel} != {}", self.value(x).len()),
            });
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push_op("reshape", shape.to_vec(), data, rg, Op::Reshape { x })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: s,
                reason: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let (outer, axis_len, inner) = split_axis(&s, axis);
        let xv = self.value(x);
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = o * axis_len * inner + start * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xv[src..src + len * inner]);
        }
        let rg = self.rg(x);
        self.push_op("slice", out_shape, out, rg, Op::Slice { x, axis, start })
    }

    /// Concatenates along `axis`; all other dims must match.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidShape { op: "concat", shape: vec![], reason: "no inputs".into() });
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape { op: "concat", shape: first, reason: format!("axis {axis}") });
        }
        let mut total_axis = 0;
        for &v in xs {
            let s = self.shape(v);
            let mut expect = first.clone();
            expect[axis] = s.get(axis).copied().unwrap_or(0);
            if s != expect.as_slice() {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for &v in xs {
            let part_axis = self.shape(v)[axis];
            let pv = self.value(v);
            for o in 0..outer {
                let src = o * part_axis * inner;
                let dst = o * total_axis * inner + offset * inner;
                out[dst..dst + part_axis * inner].copy_from_slice(&pv[src..src + part_axis * inner]);
            }
            offset += part_axis;
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push_op("concat", out_shape, out, rg, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Mean token-level negative log-likelihood of `targets` under `logits`
    /// (`[seq, vocab]`), computed with a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: s,
                reason: "logits must be [seq, vocab] with vocab >= 1".into(),
            });
        }
        let (seq, vocab) = (s[0], s[1]);
        if targets.len() != seq {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: s,
                reason: format!("{} targets for {seq} positions", targets.len()),
            });
        }
        for &t in targets {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { op: "cross_entropy", id: t, vocab });
            }
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut nll = 0.0;
        for i in 0..seq {
            let row = &lv[i * vocab..(i + 1) * vocab];
            let prow = &mut probs[i * vocab..(i + 1) * vocab];
            softmax_row(row, prow);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            nll += lse - row[targets[i] as usize];
        }
        let loss = nll / seq as f64;
        let rg = self.rg(logits);
        let targets = Arc::new(targets.to_vec());
        self.push_op("cross_entropy", vec![1], vec![loss], rg, Op::CrossEntropy { logits, targets, probs })
    }

    /// Multiplies by a compile-time constant factor.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let s = self.shape(x).to_vec();
        let out: Vec<f64> = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(x);
        self.push_op("scale", s, out, rg, Op::Scale { x, factor })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push_op("sum", vec![1], vec![total], rg, Op::Sum { x })
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::InvalidShape { op: "mean", shape: vec![0], reason: "empty input".into() });
        }
        let total: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push_op("mean", vec![1], vec![total / n as f64], rg, Op::Mean { x })
    }

    /// Masked effective weight with a straight-through backward rule.
    ///
    /// Forward emits `theta' = theta * mask` (kept entries bit-identical,
    /// masked entries exactly 0.0). Backward treats the indicator as the
    /// identity, so the score gradient is `upstream * theta` at every
    /// position, masked or kept.
    pub fn ste_mask(&mut self, theta: Var, scores: Var, mask: &MaskBits) -> Result<Var> {
        let st = self.shape(theta).to_vec();
        let ss = self.shape(scores).to_vec();
        if st != ss {
            return Err(Error::ShapeMismatch { op: "ste_mask", lhs: st, rhs: ss });
        }
        if mask.len() != self.value(theta).len() {
            return Err(Error::InvalidShape {
                op: "ste_mask",
                shape: st,
                reason: format!("mask has {} bits for {} weights", mask.len(), self.value(theta).len()),
            });
        }
        if self.rg(theta) {
            return Err(Error::InvalidMaskSpec(
                "ste_mask: theta must be frozen (requires_grad = false)".into(),
            ));
        }
        let tv = self.value(theta);
        let out: Vec<f64> = tv
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask.get(i) { v } else { 0.0 })
            .collect();
        let rg = self.rg(scores);
        self.push_op("ste_mask", st, out, rg, Op::SteMask { theta, scores })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// reachable node with `requires_grad`, then consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::NoGradLeaves);
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn take_grad(&mut self, i: usize) -> Vec<f64> {
        self.nodes[i].grad.take().expect("caller checked grad presence")
    }

    fn accum(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let g = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn step_backward(&mut self, i: usize) {
        // The grad buffer and op are moved out for the duration of the step
        // and restored afterwards, so callers can still read every gradient
        // once backward completes.
        let g = self.take_grad(i);
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let k = self.shape(a)[1];
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(&g, self.value(b), &mut da, m, n, k);
                    self.accum(a, &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(a), &g, &mut db, m, k, n);
                    self.accum(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let da = reduce_to_shape(&g, self.value(a).len());
                    self.accum(a, &da);
                }
                if self.rg(b) {
                    let db = reduce_to_shape(&g, self.value(b).len());
                    self.accum(b, &db);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let prod = broadcast_product(&g, self.value(b));
                    let da = reduce_to_shape(&prod, self.value(a).len());
                    self.accum(a, &da);
                }
                if self.rg(b) {
                    let prod = broadcast_product(&g, self.value(a));
                    let db = reduce_to_shape(&prod, self.value(b).len());
                    self.accum(b, &db);
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if self.rg(table) {
                    let d = self.shape(table)[1];
                    let mut dt = vec![0.0; self.value(table).len()];
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = id as usize * d;
                        for j in 0..d {
                            dt[dst + j] += g[row * d + j];
                        }
                    }
                    self.accum(table, &dt);
                }
            }
            Op::Softmax { x } => {
                let x = *x;
                if self.rg(x) {
                    let last = *self.nodes[i].shape.last().unwrap();
                    let y = Arc::clone(&self.nodes[i].data);
                    let mut dx = vec![0.0; y.len()];
                    for (r, drow) in dx.chunks_mut(last).enumerate() {
                        let yr = &y[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..last {
                            drow[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (x, weight) = (*x, *weight);
                let last = *self.nodes[i].shape.last().unwrap();
                let xv = Arc::clone(&self.nodes[x.0].data);
                let wv = Arc::clone(&self.nodes[weight.0].data);
                if self.rg(x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (r, drow) in dx.chunks_mut(last).enumerate() {
                        let xr = &xv[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let inv = inv_rms[r];
                        let dot: f64 = (0..last).map(|j| gr[j] * wv[j] * xr[j]).sum();
                        let coef = inv * inv * inv * dot / last as f64;
                        for j in 0..last {
                            drow[j] = gr[j] * wv[j] * inv - xr[j] * coef;
                        }
                    }
                    self.accum(x, &dx);
                }
                if self.rg(weight) {
                    let rows = xv.len() / last;
                    let mut dw = vec![0.0; last];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        for j in 0..last {
                            dw[j] += g[r * last + j] * xv[r * last + j] * inv;
                        }
                    }
                    self.accum(weight, &dw);
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.rg(x) {
                    let xv = Arc::clone(&self.nodes[x.0].data);
                    let dx: Vec<f64> = xv.iter().zip(&g).map(|(&v, gi)| gi * gelu_grad(v)).collect();
                    self.accum(x, &dx);
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                if self.rg(x) {
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut dx = vec![0.0; g.len()];
                    for p in 0..n {
                        for q in 0..m {
                            dx[q * n + p] = g[p * m + q];
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.rg(x) {
                    self.accum(x, &g);
                }
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                if self.rg(x) {
                    let in_shape = self.shape(x).to_vec();
                    let (outer, axis_len, inner) = split_axis(&in_shape, axis);
                    let len = self.nodes[i].shape[axis];
                    let mut dx = vec![0.0; self.value(x).len()];
                    for o in 0..outer {
                        let dst = o * axis_len * inner + start * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    self.accum(x, &dx);
                }
            }
            Op::Concat { xs, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[i].shape.clone();
                let (outer, total_axis, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for &v in xs {
                    let part_axis = self.shape(v)[axis];
                    if self.rg(v) {
                        let mut dv = vec![0.0; self.value(v).len()];
                        for o in 0..outer {
                            let src = o * total_axis * inner + offset * inner;
                            let dst = o * part_axis * inner;
                            dv[dst..dst + part_axis * inner]
                                .copy_from_slice(&g[src..src + part_axis * inner]);
                        }
                        self.accum(v, &dv);
                    }
                    offset += part_axis;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                if self.rg(logits) {
                    let seq = targets.len();
                    let vocab = self.shape(logits)[1];
                    let scale = g[0] / seq as f64;
                    let mut dl = probs.clone();
                    for (row, &t) in targets.iter().enumerate() {
                        dl[row * vocab + t as usize] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= scale;
                    }
                    self.accum(logits, &dl);
                }
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                if self.rg(x) {
                    let dx: Vec<f64> = g.iter().map(|gi| gi * factor).collect();
                    self.accum(x, &dx);
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if self.rg(x) {
                    let dx = vec![g[0]; self.value(x).len()];
                    self.accum(x, &dx);
                }
            }
            Op::Mean { x } => {
                let x = *x;
                if self.rg(x) {
                    let n = self.value(x).len();
                    let dx = vec![g[0] / n as f64; n];
                    self.accum(x, &dx);
                }
            }
            Op::SteMask { theta, scores } => {
                let (theta, scores) = (*theta, *scores);
                if self.rg(scores) {
                    let tv = Arc::clone(&self.nodes[theta.0].data);
                    let ds: Vec<f64> = g.iter().zip(tv.iter()).map(|(gi, ti)| gi * ti).collect();
                    self.accum(scores, &ds);
                }
            }
        }
        self.nodes[i].op = op;
        self.nodes[i].grad = Some(g);
    }
}

/// Decides broadcast compatibility: equal shapes, single-element operand, or
/// the smaller shape being a suffix of the larger. Returns whether `b` is
/// the (possibly) smaller side, or `None` when the shapes do not conform.
fn broadcast_role(sa: &[usize], sb: &[usize]) -> Option<bool> {
    let na: usize = sa.iter().product();
    let nb: usize = sb.iter().product();
    if sa == sb {
        return Some(true);
    }
    if nb == 1 || (sb.len() < sa.len() && sa.ends_with(sb)) {
        return Some(true);
    }
    if na == 1 || (sa.len() < sb.len() && sb.ends_with(sa)) {
        return Some(false);
    }
    None
}

/// Folds a gradient of the broadcast output back to an operand of `target`
/// elements by summing repeated chunks.
fn reduce_to_shape(g: &[f64], target: usize) -> Vec<f64> {
    if g.len() == target {
        return g.to_vec();
    }
    let mut out = vec![0.0; target];
    for chunk in g.chunks(target) {
        for (o, c) in out.iter_mut().zip(chunk) {
            *o += c;
        }
    }
    out
}

/// Elementwise `g * other` where `other` may need broadcasting up to
/// `g.len()`.
fn broadcast_product(g: &[f64], other: &[f64]) -> Vec<f64> {
    if other.len() == g.len() {
        g.iter().zip(other).map(|(a, b)| a * b).collect()
    } else {
        // `other` is the small operand, cycled over g
        g.iter()
            .enumerate()
            .map(|(i, a)| a * other[i % other.len()])
            .collect()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

// C[m,n] += A[m,k] @ B[k,n]; accumulation over l runs in increasing order
// for every output element.
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &ail) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += ail * bv;
            }
        }
    }
}

// C[m,n] += A[m,k] @ B[n,k]^T
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T @ B[k,n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], k_rows: usize, m: usize, n: usize) {
    for l in 0..k_rows {
        let b_row = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let ali = a[l * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += ali * bv;
            }
        }
    }
}
