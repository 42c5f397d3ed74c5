//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] stores every tensor produced during a forward computation together
//! with the operation that produced it. Entries are appended in execution order,
//! so the tape is already topologically sorted; [`Tape::backward`] walks it once
//! in reverse and accumulates parameter gradients into a [`ParamStore`].

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{LvitError, Result};
use crate::kernels::{gemm_nn, gemm_tn, swap_axes, transpose2};
use crate::param::{ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// `sqrt(2/pi)`, the GELU tanh-approximation scale.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the GELU tanh approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Softmax { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: usize },
    Dropout { x: usize, mask: Vec<f64> },
    Reshape { x: usize },
    SwapAxes { x: usize, a0: usize, a1: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Expand { x: usize },
    Sum { x: usize, axis: Option<usize> },
    Mean { x: usize, axis: Option<usize> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The computation record: an append-only list of operations in execution order.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    gelu_backward_scale: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            gelu_backward_scale: 1.0,
        }
    }

    /// Number of recorded entries.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fault injection for verification tooling: scales the GELU vector-Jacobian
    /// product so gradient checks can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn corrupt_gelu_backward(&mut self, scale: f64) {
        self.gelu_backward_scale = scale;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> usize {
        assert!(
            v.tape == self.id && v.idx < self.nodes.len(),
            "Var does not belong to this tape"
        );
        v.idx
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Record a parameter leaf. Gradients reaching it flow into `store` on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value().clone(), Op::Param(id))
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`. `b` is either `[k, n]` (shared across the batch) or
    /// `[..., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let mismatch = || LvitError::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if kb != k || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; batch_a * m * n];
        if shared_b {
            gemm_nn(da, db, &mut out, batch_a * m, k, n);
        } else {
            for bi in 0..batch_a {
                gemm_nn(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a: ia, b: ib }))
    }

    /// Affine map `x·wᵀ + b` on the last axis; `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x), self.check(w));
        let ib = b.map(|b| self.check(b));
        let (sx, sw) = (self.nodes[ix].value.shape(), self.nodes[iw].value.shape());
        if sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
            return Err(LvitError::shape("linear", format!("input {sx:?} against weight {sw:?}")));
        }
        let (out_f, in_f) = (sw[0], sw[1]);
        if let Some(ib) = ib {
            let sb = self.nodes[ib].value.shape();
            if sb != [out_f] {
                return Err(LvitError::shape("linear", format!("bias {sb:?} for {out_f} outputs")));
            }
        }
        let rows = self.nodes[ix].value.len() / in_f;
        let wt = transpose2(self.nodes[iw].value.data(), out_f, in_f);
        let mut out = vec![0.0; rows * out_f];
        if let Some(ib) = ib {
            let bias = self.nodes[ib].value.data();
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(bias);
            }
        }
        gemm_nn(self.nodes[ix].value.data(), &wt, &mut out, rows, in_f, out_f);
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = out_f;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x: ix, w: iw, b: ib }))
    }

    /// Elementwise sum. `b` may have the shape of a trailing suffix of `a`'s shape,
    /// in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(LvitError::shape("add", format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bd = self.nodes[ib].value.data();
        let mut out = self.nodes[ia].value.data().to_vec();
        for chunk in out.chunks_mut(bd.len()) {
            for (o, &v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        let value = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(value, Op::Add { a: ia, b: ib }))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(LvitError::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a: ia, b: ib }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ix = self.check(x);
        let value = self.nodes[ix].value.map(|v| v * c);
        self.push(value, Op::Scale { x: ix, c })
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let ix = self.check(x);
        let t = &self.nodes[ix].value;
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax { x: ix })
    }

    /// Layer normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(LvitError::Param(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (ix, ig, ib) = (self.check(x), self.check(gain), self.check(bias));
        let t = &self.nodes[ix].value;
        let d = t.last_dim();
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if g.shape() != [d] || b.shape() != [d] {
            return Err(LvitError::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} for feature size {d}", g.shape(), b.shape()),
            ));
        }
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, rstd }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let ix = self.check(x);
        let value = self.nodes[ix].value.map(gelu_scalar);
        self.push(value, Op::Gelu { x: ix })
    }

    /// Inverted dropout. Identity (and no RNG draws) when not training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngState, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(LvitError::Param(format!("dropout probability must be in [0, 1), got {p}")));
        }
        let ix = self.check(x);
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let t = &self.nodes[ix].value;
        let mask: Vec<f64> =
            (0..t.len()).map(|_| if rng.uniform() < p { 0.0 } else { keep_scale }).collect();
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { x: ix, mask }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x);
        let t = &self.nodes[ix].value;
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(LvitError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", t.shape()),
            ));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { x: ix }))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let ix = self.check(x);
        let t = &self.nodes[ix].value;
        if a0 >= t.rank() || a1 >= t.rank() {
            return Err(LvitError::shape(
                "transpose",
                format!("axes ({a0}, {a1}) out of range for {:?}", t.shape()),
            ));
        }
        let (data, shape) = swap_axes(t.data(), t.shape(), a0, a1);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SwapAxes { x: ix, a0, a1 }))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect();
        let first = ids
            .first()
            .map(|&i| self.nodes[i].value.shape().to_vec())
            .ok_or_else(|| LvitError::shape("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(LvitError::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(LvitError::shape(
                    "concat",
                    format!("{s:?} does not match {first:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let t = &self.nodes[i].value;
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: ids, axis }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x);
        let t = &self.nodes[ix].value;
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(LvitError::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, inner) = outer_inner(t.shape(), axis);
        let full = t.shape()[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Narrow { x: ix, axis, start }))
    }

    /// Pick one index along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let n = self.narrow(x, axis, index, 1)?;
        let shape = reduced_shape(self.shape(n), axis);
        self.reshape(n, &shape)
    }

    /// Prepend a new leading axis of size `n`, repeating `x`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(LvitError::shape("expand", "repeat count must be >= 1"));
        }
        let ix = self.check(x);
        let t = &self.nodes[ix].value;
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let out = t.data().repeat(n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Expand { x: ix }))
    }

    /// Sum over one axis, or over everything when `axis` is `None` (result shape `[1]`).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let ix = self.check(x);
        let value = reduce_sum(&self.nodes[ix].value, axis)?;
        Ok(self.push(value, Op::Sum { x: ix, axis }))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let ix = self.check(x);
        let t = &self.nodes[ix].value;
        let count = axis.map_or(t.len(), |a| t.shape().get(a).copied().unwrap_or(1));
        let value = reduce_sum(t, axis)?.map(|v| v / count as f64);
        Ok(self.push(value, Op::Mean { x: ix, axis }))
    }

    /// Mean cross-entropy of `[B, K]` logits against class indices, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits);
        let t = &self.nodes[il].value;
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(LvitError::shape(
                "cross_entropy",
                format!("logits {:?} for {} labels", t.shape(), labels.len()),
            ));
        }
        let k = t.shape()[1];
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(LvitError::Contract(format!(
                "sample {i} has label {l}, outside [0, {k})"
            )));
        }
        let mut probs = vec![0.0; t.len()];
        let mut total = 0.0;
        for (b, row) in t.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[labels[b]];
            for j in 0..k {
                probs[b * k + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(value, Op::CrossEntropy { logits: il, labels: labels.to_vec(), probs }))
    }

    /// Accumulate d(loss)/d(parameter) into `store` for every parameter reachable from `loss`.
    ///
    /// The tape is left intact, so calling this twice doubles the accumulated gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(LvitError::Contract("loss is not attached to this tape".into()));
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(LvitError::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if id.0 >= store.len() || store.get(*id).value().shape() != node.value.shape() {
                        return Err(LvitError::Contract(format!(
                            "tape parameter #{} does not match the supplied store",
                            id.0
                        )));
                    }
                    for (acc, v) in store.get_mut(*id).grad_mut().iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let sa = ta.shape();
                    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let n = tb.last_dim();
                    let batch = ta.len() / (m * k);
                    let mut ga = vec![0.0; ta.len()];
                    let mut gb = vec![0.0; tb.len()];
                    if tb.rank() == 2 {
                        let bt = transpose2(tb.data(), k, n);
                        gemm_nn(&g, &bt, &mut ga, batch * m, n, k);
                        gemm_tn(ta.data(), &g, &mut gb, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            let bt = transpose2(&tb.data()[bi * k * n..(bi + 1) * k * n], k, n);
                            gemm_nn(gs, &bt, &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                            gemm_tn(
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                gs,
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (out_f, in_f) = (tw.shape()[0], tw.shape()[1]);
                    let rows = tx.len() / in_f;
                    let mut gx = vec![0.0; tx.len()];
                    gemm_nn(&g, tw.data(), &mut gx, rows, out_f, in_f);
                    let mut gw = vec![0.0; tw.len()];
                    gemm_tn(&g, tx.data(), &mut gw, rows, out_f, in_f);
                    if let Some(b) = b {
                        let mut gb = vec![0.0; out_f];
                        for row in g.chunks(out_f) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Add { a, b } => {
                    let nb = self.nodes[*b].value.len();
                    let mut gb = vec![0.0; nb];
                    for chunk in g.chunks(nb) {
                        for (acc, v) in gb.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    let gb = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * c).collect());
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gvals = self.nodes[*gain].value.data();
                    let d = gvals.len();
                    let mut gx = vec![0.0; xhat.len()];
                    let mut gg = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                            gbias[j] += gr[j];
                            dxhat[j] = gr[j] * gvals[j];
                            mean_dh += dxhat[j];
                            mean_dh_h += dxhat[j] * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rs * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::Gelu { x } => {
                    let s = self.gelu_backward_scale;
                    let xs = self.nodes[*x].value.data();
                    let gx = xs.iter().zip(&g).map(|(&v, gv)| gv * gelu_derivative(v) * s).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
                }
                Op::Reshape { x } => accumulate(&mut grads, *x, g),
                Op::SwapAxes { x, a0, a1 } => {
                    let (gx, _) = swap_axes(&g, node.value.shape(), *a0, *a1);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, inner) = outer_inner(node.value.shape(), *axis);
                    let total = node.value.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = self.nodes[inp].value.shape()[*axis] * inner;
                        let mut gi = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gi.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        offset += len;
                        accumulate(&mut grads, inp, gi);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let src = self.nodes[*x].value.shape();
                    let (outer, inner) = outer_inner(src, *axis);
                    let full = src[*axis] * inner;
                    let len = node.value.shape()[*axis] * inner;
                    let mut gx = vec![0.0; self.nodes[*x].value.len()];
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        gx[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Expand { x } => {
                    let n = self.nodes[*x].value.len();
                    let mut gx = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (acc, v) in gx.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let src = &self.nodes[*x].value;
                    let count = match axis {
                        None => src.len(),
                        Some(a) => src.shape()[*a],
                    };
                    let factor = if matches!(node.op, Op::Mean { .. }) { 1.0 / count as f64 } else { 1.0 };
                    let gx = match axis {
                        None => vec![g[0] * factor; src.len()],
                        Some(a) => {
                            let (outer, inner) = outer_inner(src.shape(), *a);
                            let mut gx = vec![0.0; src.len()];
                            for o in 0..outer {
                                for j in 0..count {
                                    for q in 0..inner {
                                        gx[(o * count + j) * inner + q] = g[o * inner + q] * factor;
                                    }
                                }
                            }
                            gx
                        }
                    };
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let k = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (b, &l) in labels.iter().enumerate() {
                        gl[b * k + l] -= scale;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn reduce_sum(t: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::scalar(t.data().iter().sum())),
        Some(a) if a < t.rank() => {
            let (outer, inner) = outer_inner(t.shape(), a);
            let count = t.shape()[a];
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..count {
                    for q in 0..inner {
                        out[o * inner + q] += t.data()[(o * count + j) * inner + q];
                    }
                }
            }
            Tensor::new(reduced_shape(t.shape(), a), out)
        }
        Some(a) => Err(LvitError::shape("reduce", format!("axis {a} out of range for {:?}", t.shape()))),
    }
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}
