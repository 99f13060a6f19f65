//! Reverse-mode differentiation over a linear tape of coarse-grained ops.
//!
//! The tape is rebuilt for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse iteration.
//! Ops are coarse (whole BiLSTM runs, whole attention summaries) to keep
//! node counts low; each op carries a hand-written backward rule that the
//! finite-difference check validates end to end.

use crate::error::{DstError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;
use std::collections::HashMap;

pub type VarId = usize;

/// Numerically stable logistic function. The result is kept strictly
/// inside (0,1): deep saturation clamps to the nearest representable
/// neighbour of 0 or 1 instead of rounding onto the endpoint.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Softmax over `scores` restricted to positions where `mask` is true.
/// Masked-out positions are exactly zero in the result.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(scores.len(), mask.len(), "scores/mask length mismatch");
    let mut max = f64::NEG_INFINITY;
    for (s, &m) in scores.iter().zip(mask) {
        if m && *s > max {
            max = *s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(DstError::EmptyAttentionSupport);
    }
    let mut out = vec![0.0; scores.len()];
    let mut z = 0.0;
    for i in 0..scores.len() {
        if mask[i] {
            let e = (scores[i] - max).exp();
            out[i] = e;
            z += e;
        }
    }
    for v in out.iter_mut() {
        *v /= z;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    /// Elementwise product with a constant tensor (dropout masks etc.).
    MulConst { a: VarId },
    Sigmoid { a: VarId },
    Tanh { a: VarId },
    /// gate * a + (1 - gate) * b, gate a scalar node.
    Mix { a: VarId, b: VarId, gate: VarId },
    /// Bidirectional LSTM over the first `len` rows of x.
    BiLstm { x: VarId, wx_f: VarId, wh_f: VarId, b_f: VarId, wx_b: VarId, wh_b: VarId, b_b: VarId, len: usize },
    /// a_i = w . H_i + b for each row of h.
    AttnScores { h: VarId, w: VarId, b: VarId },
    /// a_i = H_i . v for each row of h.
    RowsDotVec { h: VarId, v: VarId },
    /// Masked softmax over a score vector; mask kept in `aux` as 0/1.
    MaskedSoftmax { a: VarId },
    /// sum_i p_i * H_i.
    WeightedRows { p: VarId, h: VarId },
    /// Masked mean over rows of h; mask in `aux`.
    MeanRows { h: VarId },
    /// Stack k equal-length vectors into a k x d matrix.
    StackVecs { parts: Vec<VarId> },
    /// Stack k scalars into a length-k vector.
    StackScalars { parts: Vec<VarId> },
    Dot { a: VarId, b: VarId },
    SumScalars { parts: Vec<VarId> },
    MeanScalars { parts: Vec<VarId> },
    /// Mean binary cross-entropy computed from logits; targets in `aux`.
    BceMeanLogits { logits: VarId },
    /// Row gather from an embedding table.
    Gather { table: VarId, indices: Vec<usize> },
    Reshape { a: VarId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Constant payload (masks, targets) not differentiated through.
    aux: Option<Tensor>,
    /// Forward intermediates saved for the backward pass (BiLSTM gates).
    saved: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, VarId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v].value
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Option<Tensor>, saved: Vec<f64>) -> VarId {
        debug_assert!(value.all_finite(), "non-finite value out of {:?}", op);
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, aux, saved });
        id
    }

    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf { param: None }, t, None, Vec::new())
    }

    /// Register a parameter as a leaf; memoized so each parameter appears
    /// on the tape at most once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> VarId {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Op::Leaf { param: Some(id) }, store.get(id).clone(), None, Vec::new());
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(ta.same_shape(tb), "add shape mismatch");
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Add { a, b }, t, None, Vec::new())
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(ta.same_shape(tb), "mul shape mismatch");
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Mul { a, b }, t, None, Vec::new())
    }

    /// Elementwise product with a constant mask tensor.
    pub fn mul_const(&mut self, a: VarId, mask: Tensor) -> VarId {
        let ta = &self.nodes[a].value;
        assert!(ta.same_shape(&mask), "mul_const shape mismatch");
        let data: Vec<f64> = ta.data().iter().zip(mask.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::MulConst { a }, t, Some(mask), Vec::new())
    }

    pub fn sigmoid_op(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Sigmoid { a }, t, None, Vec::new())
    }

    pub fn tanh_op(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let data: Vec<f64> = ta.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Tanh { a }, t, None, Vec::new())
    }

    /// gate * a + (1 - gate) * b. `gate` must be a scalar node.
    pub fn mix(&mut self, gate: VarId, a: VarId, b: VarId) -> VarId {
        let beta = self.nodes[gate].value.scalar_value();
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(ta.same_shape(tb), "mix shape mismatch");
        let data: Vec<f64> =
            ta.data().iter().zip(tb.data()).map(|(x, y)| beta * x + (1.0 - beta) * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Mix { a, b, gate }, t, None, Vec::new())
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> VarId {
        let ta = &self.nodes[a].value;
        assert_eq!(shape.iter().product::<usize>(), ta.numel(), "reshape numel mismatch");
        let t = Tensor::new(shape, ta.data().to_vec()).unwrap();
        self.push(Op::Reshape { a }, t, None, Vec::new())
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(ta.same_shape(tb), "dot shape mismatch");
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.push(Op::Dot { a, b }, Tensor::scalar(s), None, Vec::new())
    }

    pub fn stack_vecs(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let d = self.nodes[parts[0]].value.numel();
        let mut data = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            let t = &self.nodes[p].value;
            assert_eq!(t.numel(), d, "stack_vecs length mismatch");
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(parts.len(), d, data).unwrap();
        self.push(Op::StackVecs { parts: parts.to_vec() }, t, None, Vec::new())
    }

    pub fn stack_scalars(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let data: Vec<f64> = parts.iter().map(|&p| self.nodes[p].value.scalar_value()).collect();
        self.push(Op::StackScalars { parts: parts.to_vec() }, Tensor::vector(data), None, Vec::new())
    }

    pub fn sum_scalars(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let s: f64 = parts.iter().map(|&p| self.nodes[p].value.scalar_value()).sum();
        self.push(Op::SumScalars { parts: parts.to_vec() }, Tensor::scalar(s), None, Vec::new())
    }

    pub fn mean_scalars(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let s: f64 = parts.iter().map(|&p| self.nodes[p].value.scalar_value()).sum();
        let m = s / parts.len() as f64;
        self.push(Op::MeanScalars { parts: parts.to_vec() }, Tensor::scalar(m), None, Vec::new())
    }

    /// Per-row affine attention score: a_i = w . H_i + b.
    pub fn attn_scores(&mut self, h: VarId, w: VarId, b: VarId) -> VarId {
        let (th, tw) = (&self.nodes[h].value, &self.nodes[w].value);
        assert_eq!(th.cols(), tw.numel(), "attn_scores dim mismatch");
        let bias = self.nodes[b].value.scalar_value();
        let data: Vec<f64> = (0..th.rows())
            .map(|i| th.row(i).iter().zip(tw.data()).map(|(x, y)| x * y).sum::<f64>() + bias)
            .collect();
        self.push(Op::AttnScores { h, w, b }, Tensor::vector(data), None, Vec::new())
    }

    /// a_i = H_i . v.
    pub fn rows_dot_vec(&mut self, h: VarId, v: VarId) -> VarId {
        let (th, tv) = (&self.nodes[h].value, &self.nodes[v].value);
        assert_eq!(th.cols(), tv.numel(), "rows_dot_vec dim mismatch");
        let data: Vec<f64> = (0..th.rows())
            .map(|i| th.row(i).iter().zip(tv.data()).map(|(x, y)| x * y).sum::<f64>())
            .collect();
        self.push(Op::RowsDotVec { h, v }, Tensor::vector(data), None, Vec::new())
    }

    pub fn masked_softmax_op(&mut self, a: VarId, mask: &[bool]) -> Result<VarId> {
        let ta = &self.nodes[a].value;
        assert_eq!(ta.numel(), mask.len(), "softmax mask length mismatch");
        let p = masked_softmax(ta.data(), mask)?;
        let aux = Tensor::vector(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        Ok(self.push(Op::MaskedSoftmax { a }, Tensor::vector(p), Some(aux), Vec::new()))
    }

    /// c = sum_i p_i H_i.
    pub fn weighted_rows(&mut self, p: VarId, h: VarId) -> VarId {
        let (tp, th) = (&self.nodes[p].value, &self.nodes[h].value);
        assert_eq!(tp.numel(), th.rows(), "weighted_rows length mismatch");
        let d = th.cols();
        let mut out = vec![0.0; d];
        for i in 0..th.rows() {
            let w = tp.data()[i];
            for (o, x) in out.iter_mut().zip(th.row(i)) {
                *o += w * x;
            }
        }
        self.push(Op::WeightedRows { p, h }, Tensor::vector(out), None, Vec::new())
    }

    /// Masked mean over rows (the mean-pooling ablation of self-attention).
    pub fn mean_rows(&mut self, h: VarId, mask: &[bool]) -> Result<VarId> {
        let th = &self.nodes[h].value;
        assert_eq!(th.rows(), mask.len(), "mean_rows mask length mismatch");
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(DstError::EmptyAttentionSupport);
        }
        let d = th.cols();
        let mut out = vec![0.0; d];
        for i in 0..th.rows() {
            if mask[i] {
                for (o, x) in out.iter_mut().zip(th.row(i)) {
                    *o += x;
                }
            }
        }
        for o in out.iter_mut() {
            *o /= count as f64;
        }
        let aux = Tensor::vector(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        Ok(self.push(Op::MeanRows { h }, Tensor::vector(out), Some(aux), Vec::new()))
    }

    /// Mean binary cross-entropy over a vector of logits.
    pub fn bce_mean_logits(&mut self, logits: VarId, targets: &[f64]) -> VarId {
        let tl = &self.nodes[logits].value;
        assert_eq!(tl.numel(), targets.len(), "bce target length mismatch");
        let k = targets.len() as f64;
        let mut total = 0.0;
        for (&z, &t) in tl.data().iter().zip(targets) {
            // softplus(z) - t*z, computed without overflow
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let aux = Tensor::vector(targets.to_vec());
        self.push(Op::BceMeanLogits { logits }, Tensor::scalar(total / k), Some(aux), Vec::new())
    }

    pub fn gather(&mut self, table: VarId, indices: &[usize]) -> Result<VarId> {
        let tt = &self.nodes[table].value;
        let (rows, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(DstError::IndexOutOfBounds { index: i, rows });
            }
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(indices.len(), d, data).unwrap();
        Ok(self.push(Op::Gather { table, indices: indices.to_vec() }, t, None, Vec::new()))
    }

    /// Bidirectional LSTM over the first `len` rows of `x`; rows past `len`
    /// come out as zeros. Gate layout in the stacked weights is [i, f, g, o].
    #[allow(clippy::too_many_arguments)]
    pub fn bilstm(
        &mut self,
        x: VarId,
        wx_f: VarId,
        wh_f: VarId,
        b_f: VarId,
        wx_b: VarId,
        wh_b: VarId,
        b_b: VarId,
        len: usize,
    ) -> Result<VarId> {
        let tx = &self.nodes[x].value;
        let n = tx.rows();
        if len == 0 || n == 0 {
            return Err(DstError::EmptySequence);
        }
        assert!(len <= n, "mask length exceeds sequence length");
        let hidden = self.nodes[b_f].value.numel() / 4;
        let d_in = tx.cols();
        assert_eq!(self.nodes[wx_f].value.shape(), &[4 * hidden, d_in]);
        assert_eq!(self.nodes[wh_f].value.shape(), &[4 * hidden, hidden]);

        let mut out = vec![0.0; n * 2 * hidden];
        // saved: per direction, per step: [i f g o c] each of size hidden
        let mut saved = vec![0.0; 2 * len * 5 * hidden];

        for dir in 0..2 {
            let (wx, wh, b) = if dir == 0 {
                (&self.nodes[wx_f].value, &self.nodes[wh_f].value, &self.nodes[b_f].value)
            } else {
                (&self.nodes[wx_b].value, &self.nodes[wh_b].value, &self.nodes[b_b].value)
            };
            let mut h_prev = vec![0.0; hidden];
            let mut c_prev = vec![0.0; hidden];
            for step in 0..len {
                let t = if dir == 0 { step } else { len - 1 - step };
                let xt = tx.row(t);
                // z = Wx x + Wh h + b
                let mut z = b.data().to_vec();
                for r in 0..4 * hidden {
                    let wxr = wx.row(r);
                    let whr = wh.row(r);
                    let mut acc = 0.0;
                    for c in 0..d_in {
                        acc += wxr[c] * xt[c];
                    }
                    for c in 0..hidden {
                        acc += whr[c] * h_prev[c];
                    }
                    z[r] += acc;
                }
                let base = (dir * len + step) * 5 * hidden;
                for j in 0..hidden {
                    let ig = sigmoid(z[j]);
                    let fg = sigmoid(z[hidden + j]);
                    let gg = z[2 * hidden + j].tanh();
                    let og = sigmoid(z[3 * hidden + j]);
                    let c_new = fg * c_prev[j] + ig * gg;
                    let h_new = og * c_new.tanh();
                    saved[base + j] = ig;
                    saved[base + hidden + j] = fg;
                    saved[base + 2 * hidden + j] = gg;
                    saved[base + 3 * hidden + j] = og;
                    saved[base + 4 * hidden + j] = c_new;
                    c_prev[j] = c_new;
                    h_prev[j] = h_new;
                    out[t * 2 * hidden + dir * hidden + j] = h_new;
                }
            }
        }
        let value = Tensor::matrix(n, 2 * hidden, out).unwrap();
        Ok(self.push(Op::BiLstm { x, wx_f, wh_f, b_f, wx_b, wh_b, b_b, len }, value, None, saved))
    }

    /// Reverse sweep from `loss`, which must be scalar. Returns gradients
    /// for every parameter leaf reachable from it.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let loss_t = &self.nodes[loss].value;
        if !loss_t.is_scalar() {
            return Err(DstError::NonScalarLoss(loss_t.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients::new();

        for id in (0..=loss).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        grads.accumulate(*pid, &g)?;
                    }
                }
                Op::Add { a, b } => {
                    accum(&mut adj, *a, g.clone());
                    accum(&mut adj, *b, g);
                }
                Op::Mul { a, b } => {
                    let ga = ewise(&g, &self.nodes[*b].value);
                    let gb = ewise(&g, &self.nodes[*a].value);
                    accum(&mut adj, *a, ga);
                    accum(&mut adj, *b, gb);
                }
                Op::MulConst { a } => {
                    let mask = node.aux.as_ref().unwrap();
                    accum(&mut adj, *a, ewise(&g, mask));
                }
                Op::Sigmoid { a } => {
                    let y = &node.value;
                    let data: Vec<f64> =
                        g.data().iter().zip(y.data()).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                    accum(&mut adj, *a, Tensor::new(y.shape().to_vec(), data).unwrap());
                }
                Op::Tanh { a } => {
                    let y = &node.value;
                    let data: Vec<f64> =
                        g.data().iter().zip(y.data()).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                    accum(&mut adj, *a, Tensor::new(y.shape().to_vec(), data).unwrap());
                }
                Op::Mix { a, b, gate } => {
                    let beta = self.nodes[*gate].value.scalar_value();
                    let ta = &self.nodes[*a].value;
                    let tb = &self.nodes[*b].value;
                    let ga: Vec<f64> = g.data().iter().map(|gi| beta * gi).collect();
                    let gb: Vec<f64> = g.data().iter().map(|gi| (1.0 - beta) * gi).collect();
                    let dgate: f64 = g
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(gi, (x, y))| gi * (x - y))
                        .sum();
                    accum(&mut adj, *a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
                    accum(&mut adj, *b, Tensor::new(tb.shape().to_vec(), gb).unwrap());
                    accum(&mut adj, *gate, Tensor::scalar(dgate));
                }
                Op::AttnScores { h, w, b } => {
                    let th = &self.nodes[*h].value;
                    let tw = &self.nodes[*w].value;
                    let d = th.cols();
                    let mut gh = vec![0.0; th.numel()];
                    let mut gw = vec![0.0; d];
                    let mut gb = 0.0;
                    for i in 0..th.rows() {
                        let gi = g.data()[i];
                        gb += gi;
                        let hrow = th.row(i);
                        for j in 0..d {
                            gh[i * d + j] += gi * tw.data()[j];
                            gw[j] += gi * hrow[j];
                        }
                    }
                    accum(&mut adj, *h, Tensor::matrix(th.rows(), d, gh).unwrap());
                    accum(&mut adj, *w, Tensor::vector(gw));
                    accum(&mut adj, *b, Tensor::scalar(gb));
                }
                Op::RowsDotVec { h, v } => {
                    let th = &self.nodes[*h].value;
                    let tv = &self.nodes[*v].value;
                    let d = th.cols();
                    let mut gh = vec![0.0; th.numel()];
                    let mut gv = vec![0.0; d];
                    for i in 0..th.rows() {
                        let gi = g.data()[i];
                        let hrow = th.row(i);
                        for j in 0..d {
                            gh[i * d + j] += gi * tv.data()[j];
                            gv[j] += gi * hrow[j];
                        }
                    }
                    accum(&mut adj, *h, Tensor::matrix(th.rows(), d, gh).unwrap());
                    accum(&mut adj, *v, Tensor::vector(gv));
                }
                Op::MaskedSoftmax { a } => {
                    let p = node.value.data();
                    let mask = node.aux.as_ref().unwrap().data();
                    let inner: f64 = p.iter().zip(g.data()).map(|(pi, gi)| pi * gi).sum();
                    let da: Vec<f64> = (0..p.len())
                        .map(|i| if mask[i] > 0.0 { p[i] * (g.data()[i] - inner) } else { 0.0 })
                        .collect();
                    accum(&mut adj, *a, Tensor::vector(da));
                }
                Op::WeightedRows { p, h } => {
                    let tp = &self.nodes[*p].value;
                    let th = &self.nodes[*h].value;
                    let d = th.cols();
                    let mut gp = vec![0.0; tp.numel()];
                    let mut gh = vec![0.0; th.numel()];
                    for i in 0..th.rows() {
                        let hrow = th.row(i);
                        let wi = tp.data()[i];
                        for j in 0..d {
                            gp[i] += hrow[j] * g.data()[j];
                            gh[i * d + j] += wi * g.data()[j];
                        }
                    }
                    accum(&mut adj, *p, Tensor::vector(gp));
                    accum(&mut adj, *h, Tensor::matrix(th.rows(), d, gh).unwrap());
                }
                Op::MeanRows { h } => {
                    let th = &self.nodes[*h].value;
                    let mask = node.aux.as_ref().unwrap().data();
                    let count = mask.iter().filter(|&&m| m > 0.0).count() as f64;
                    let d = th.cols();
                    let mut gh = vec![0.0; th.numel()];
                    for i in 0..th.rows() {
                        if mask[i] > 0.0 {
                            for j in 0..d {
                                gh[i * d + j] = g.data()[j] / count;
                            }
                        }
                    }
                    accum(&mut adj, *h, Tensor::matrix(th.rows(), d, gh).unwrap());
                }
                Op::StackVecs { parts } => {
                    for (i, &p) in parts.iter().enumerate() {
                        accum(&mut adj, p, Tensor::vector(g.row(i).to_vec()));
                    }
                }
                Op::StackScalars { parts } => {
                    for (i, &p) in parts.iter().enumerate() {
                        accum(&mut adj, p, Tensor::scalar(g.data()[i]));
                    }
                }
                Op::Dot { a, b } => {
                    let g0 = g.scalar_value();
                    let ta = &self.nodes[*a].value;
                    let tb = &self.nodes[*b].value;
                    let ga: Vec<f64> = tb.data().iter().map(|x| g0 * x).collect();
                    let gb: Vec<f64> = ta.data().iter().map(|x| g0 * x).collect();
                    accum(&mut adj, *a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
                    accum(&mut adj, *b, Tensor::new(tb.shape().to_vec(), gb).unwrap());
                }
                Op::SumScalars { parts } => {
                    let g0 = g.scalar_value();
                    for &p in parts {
                        accum(&mut adj, p, Tensor::scalar(g0));
                    }
                }
                Op::MeanScalars { parts } => {
                    let g0 = g.scalar_value() / parts.len() as f64;
                    for &p in parts {
                        accum(&mut adj, p, Tensor::scalar(g0));
                    }
                }
                Op::BceMeanLogits { logits } => {
                    let g0 = g.scalar_value();
                    let z = self.nodes[*logits].value.data();
                    let t = node.aux.as_ref().unwrap().data();
                    let k = z.len() as f64;
                    let dz: Vec<f64> =
                        z.iter().zip(t).map(|(&zi, &ti)| g0 * (sigmoid(zi) - ti) / k).collect();
                    accum(&mut adj, *logits, Tensor::vector(dz));
                }
                Op::Gather { table, indices } => {
                    let tt = &self.nodes[*table].value;
                    let d = tt.cols();
                    let mut gt = vec![0.0; tt.numel()];
                    for (i, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[idx * d + j] += g.data()[i * d + j];
                        }
                    }
                    accum(&mut adj, *table, Tensor::matrix(tt.rows(), d, gt).unwrap());
                }
                Op::Reshape { a } => {
                    let ta = &self.nodes[*a].value;
                    accum(&mut adj, *a, Tensor::new(ta.shape().to_vec(), g.data().to_vec()).unwrap());
                }
                Op::BiLstm { .. } => {
                    self.backward_bilstm(id, &g, &mut adj);
                }
            }
        }
        Ok(grads)
    }

    fn backward_bilstm(&self, id: VarId, g: &Tensor, adj: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        let (x, wx_f, wh_f, b_f, wx_b, wh_b, b_b, len) = match node.op {
            Op::BiLstm { x, wx_f, wh_f, b_f, wx_b, wh_b, b_b, len } => {
                (x, wx_f, wh_f, b_f, wx_b, wh_b, b_b, len)
            }
            _ => unreachable!(),
        };
        let tx = &self.nodes[x].value;
        let n = tx.rows();
        let d_in = tx.cols();
        let hidden = self.nodes[b_f].value.numel() / 4;
        let out = &node.value;
        let saved = &node.saved;

        let mut gx = vec![0.0; n * d_in];
        for dir in 0..2 {
            let (wx_t, wh_t) = if dir == 0 {
                (&self.nodes[wx_f].value, &self.nodes[wh_f].value)
            } else {
                (&self.nodes[wx_b].value, &self.nodes[wh_b].value)
            };
            let mut gwx = vec![0.0; 4 * hidden * d_in];
            let mut gwh = vec![0.0; 4 * hidden * hidden];
            let mut gb = vec![0.0; 4 * hidden];
            let mut dh_next = vec![0.0; hidden];
            let mut dc_next = vec![0.0; hidden];
            // walk the recurrence in reverse of its own scan order
            for step in (0..len).rev() {
                let t = if dir == 0 { step } else { len - 1 - step };
                let base = (dir * len + step) * 5 * hidden;
                // previous (in scan order) hidden/cell state
                let (h_prev, c_prev): (Vec<f64>, Vec<f64>) = if step == 0 {
                    (vec![0.0; hidden], vec![0.0; hidden])
                } else {
                    let tp = if dir == 0 { step - 1 } else { len - step };
                    let prev_base = (dir * len + step - 1) * 5 * hidden;
                    let h: Vec<f64> = (0..hidden)
                        .map(|j| out.data()[tp * 2 * hidden + dir * hidden + j])
                        .collect();
                    let c: Vec<f64> = (0..hidden).map(|j| saved[prev_base + 4 * hidden + j]).collect();
                    (h, c)
                };
                let mut dz = vec![0.0; 4 * hidden];
                for j in 0..hidden {
                    let ig = saved[base + j];
                    let fg = saved[base + hidden + j];
                    let gg = saved[base + 2 * hidden + j];
                    let og = saved[base + 3 * hidden + j];
                    let ct = saved[base + 4 * hidden + j];
                    let tanh_c = ct.tanh();
                    let dh = dh_next[j] + g.data()[t * 2 * hidden + dir * hidden + j];
                    let dmut_o = dh * tanh_c;
                    let dc = dc_next[j] + dh * og * (1.0 - tanh_c * tanh_c);
                    let di = dc * gg;
                    let df = dc * c_prev[j];
                    let dg = dc * ig;
                    dz[j] = di * ig * (1.0 - ig);
                    dz[hidden + j] = df * fg * (1.0 - fg);
                    dz[2 * hidden + j] = dg * (1.0 - gg * gg);
                    dz[3 * hidden + j] = dmut_o * og * (1.0 - og);
                    dc_next[j] = dc * fg;
                }
                let xt = tx.row(t);
                let mut dh_prev = vec![0.0; hidden];
                for r in 0..4 * hidden {
                    let dzr = dz[r];
                    if dzr == 0.0 {
                        continue;
                    }
                    gb[r] += dzr;
                    let wxr = wx_t.row(r);
                    let whr = wh_t.row(r);
                    for c in 0..d_in {
                        gwx[r * d_in + c] += dzr * xt[c];
                        gx[t * d_in + c] += dzr * wxr[c];
                    }
                    for c in 0..hidden {
                        gwh[r * hidden + c] += dzr * h_prev[c];
                        dh_prev[c] += dzr * whr[c];
                    }
                }
                dh_next = dh_prev;
            }
            let (vwx, vwh, vb) = if dir == 0 { (wx_f, wh_f, b_f) } else { (wx_b, wh_b, b_b) };
            accum(adj, vwx, Tensor::matrix(4 * hidden, d_in, gwx).unwrap());
            accum(adj, vwh, Tensor::matrix(4 * hidden, hidden, gwh).unwrap());
            accum(adj, vb, Tensor::vector(gb));
        }
        accum(adj, x, Tensor::matrix(n, d_in, gx).unwrap());
    }
}

fn accum(adj: &mut [Option<Tensor>], id: VarId, g: Tensor) {
    match &mut adj[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn ewise(a: &Tensor, b: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}
