// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numeric kernels shared by the graph's forward and backward passes.
//!
//! Every reduction walks its inputs in ascending flat-index order so that
//! results are bit-reproducible for a given shape.

use crate::error::{Result, TensorError};
use crate::tensor::{strides_of, Tensor};

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// NumPy-style broadcast of two shapes (right-aligned, size-1 stretches).
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` when viewed inside the broadcast `out` shape; axes that
/// are stretched (or missing) get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Walks `shape` in row-major order, yielding the offset into each operand.
struct StridedWalk {
    shape: Vec<usize>,
    strides: Vec<Vec<usize>>,
    index: Vec<usize>,
    offsets: Vec<usize>,
    remaining: usize,
}

impl StridedWalk {
    fn new(shape: &[usize], strides: Vec<Vec<usize>>) -> Self {
        let n = strides.len();
        Self {
            shape: shape.to_vec(),
            strides,
            index: vec![0; shape.len()],
            offsets: vec![0; n],
            remaining: shape.iter().product(),
        }
    }

    fn next_offsets(&mut self) -> Option<&[usize]> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(&self.offsets)
    }

    fn advance(&mut self) {
        for axis in (0..self.shape.len()).rev() {
            self.index[axis] += 1;
            for (off, st) in self.offsets.iter_mut().zip(&self.strides) {
                *off += st[axis];
            }
            if self.index[axis] < self.shape[axis] {
                return;
            }
            for (off, st) in self.offsets.iter_mut().zip(&self.strides) {
                *off -= st[axis] * self.shape[axis];
            }
            self.index[axis] = 0;
        }
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape(), op)?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape, data);
    }
    if out_shape == a.shape() && is_suffix(b.shape(), a.shape()) && b.numel() > 0 {
        let bd = b.data();
        let data = a
            .data()
            .chunks(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        return Tensor::new(out_shape, data);
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut walk = StridedWalk::new(&out_shape, vec![sa, sb]);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    while let Some(off) = walk.next_offsets() {
        data.push(f(a.data()[off[0]], b.data()[off[1]]));
        walk.advance();
    }
    Tensor::new(out_shape, data)
}

/// Sums `grad` (shaped like a broadcast output) back down to `shape`.
pub fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    if is_suffix(shape, grad.shape()) && !shape.is_empty() {
        let n = out.numel();
        let od = out.data_mut();
        for chunk in grad.data().chunks(n) {
            for (o, &g) in od.iter_mut().zip(chunk) {
                *o += g;
            }
        }
        return out;
    }
    let st = broadcast_strides(shape, grad.shape());
    let mut walk = StridedWalk::new(grad.shape(), vec![st]);
    let od = out.data_mut();
    let mut i = 0;
    while let Some(off) = walk.next_offsets() {
        od[off[0]] += grad.data()[i];
        i += 1;
        walk.advance();
    }
    out
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Raw strided GEMM: `c = a·b + beta·c` where `a` is m×k and `b` is k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let a_extent = (m - 1) * rsa + (k - 1) * csa;
    let b_extent = (k - 1) * rsb + (n - 1) * csb;
    assert!(a_extent < a.len() && b_extent < b.len() && m * n <= c.len(), "gemm bounds");
    // SAFETY: the asserted extents keep every strided read inside `a` and
    // `b`, and `c` is written densely as m×n row-major within its length.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Resolved batch structure of a (possibly broadcast) batched matmul.
pub struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// For each output batch index, the lhs and rhs batch indices it reads.
    pub pairs: Vec<(usize, usize)>,
    /// rhs is a plain matrix, so the lhs can be treated as one tall matrix.
    pub flat_rhs: bool,
}

pub fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shape(ba, bb, "matmul")?;
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut walk = StridedWalk::new(&batch, vec![sa, sb]);
    let mut pairs = Vec::with_capacity(batch.iter().product());
    while let Some(off) = walk.next_offsets() {
        pairs.push((off[0], off[1]));
        walk.advance();
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    let flat_rhs = bb.is_empty();
    Ok(MatmulPlan { m, k, n, out_shape, pairs, flat_rhs })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let MatmulPlan { m, k, n, .. } = plan;
    let mut out = Tensor::zeros(&plan.out_shape);
    if plan.flat_rhs {
        let rows = a.numel() / k.max(1);
        let rows = if k == 0 { plan.pairs.len() * m } else { rows };
        gemm(rows, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, out.data_mut());
        return Ok(out);
    }
    let od = out.data_mut();
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        gemm(
            m,
            k,
            n,
            &a.data()[ia * m * k..],
            (k, 1),
            &b.data()[ib * k * n..],
            (n, 1),
            0.0,
            &mut od[o * m * n..],
        );
    }
    Ok(out)
}

/// Gradients of `a·b` given the output gradient `g`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let MatmulPlan { m, k, n, .. } = plan;
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    if plan.flat_rhs {
        let rows = plan.pairs.len() * m;
        // ga = G·bᵀ
        gemm(rows, n, k, g.data(), (n, 1), b.data(), (1, n), 0.0, ga.data_mut());
        // gb = aᵀ·G
        gemm(k, rows, n, a.data(), (1, k), g.data(), (n, 1), 0.0, gb.data_mut());
        return Ok((ga, gb));
    }
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        let gs = &g.data()[o * m * n..];
        gemm(
            m,
            n,
            k,
            gs,
            (n, 1),
            &b.data()[ib * k * n..],
            (1, n),
            1.0,
            &mut ga.data_mut()[ia * m * k..],
        );
        gemm(
            k,
            m,
            n,
            &a.data()[ia * m * k..],
            (1, k),
            gs,
            (n, 1),
            1.0,
            &mut gb.data_mut()[ib * k * n..],
        );
    }
    Ok((ga, gb))
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(TensorError::InvalidArgument {
            op: "permute",
            msg: format!("{perm:?} is not a permutation of rank {rank}"),
        });
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let st: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut walk = StridedWalk::new(&out_shape, vec![st]);
    let mut data = Vec::with_capacity(x.numel());
    while let Some(off) = walk.next_offsets() {
        data.push(x.data()[off[0]]);
        walk.advance();
    }
    Tensor::new(out_shape, data)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, axis_len, inner)` factorisation of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(TensorError::InvalidArgument {
            op: "sum_axis",
            msg: format!("axis {axis} out of range for {:?}", x.shape()),
        });
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape.remove(axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Inverse of [`sum_axis`]: repeats `g` `len` times along a new `axis`.
pub fn expand_axis(g: &Tensor, axis: usize, len: usize) -> Result<Tensor> {
    let mut shape = g.shape().to_vec();
    shape.insert(axis, len);
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = &g.data()[o * inner..(o + 1) * inner];
        for _ in 0..len {
            data.extend_from_slice(src);
        }
    }
    Tensor::new(shape, data)
}

pub fn select(x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(TensorError::InvalidArgument {
            op: "select",
            msg: format!("axis {axis} out of range for {:?}", x.shape()),
        });
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
        return Err(TensorError::InvalidArgument {
            op: "select",
            msg: format!("index {bad} out of range for axis of size {len}"),
        });
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = indices.len();
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            data.extend_from_slice(&x.data()[(o * len + i) * inner..(o * len + i + 1) * inner]);
        }
    }
    Tensor::new(shape, data)
}

/// Scatter-add of a [`select`] gradient back into the source shape.
pub fn select_backward(g: &Tensor, shape: &[usize], axis: usize, indices: &[usize]) -> Tensor {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for o in 0..outer {
        for (j, &i) in indices.iter().enumerate() {
            let src = &g.data()[(o * indices.len() + j) * inner..(o * indices.len() + j + 1) * inner];
            for (d, &s) in od[(o * len + i) * inner..(o * len + i + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs.first().ok_or(TensorError::InvalidArgument {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    if axis >= first.rank() {
        return Err(TensorError::InvalidArgument {
            op: "concat",
            msg: format!("axis {axis} out of range for {:?}", first.shape()),
        });
    }
    for x in xs {
        let ok = x.rank() == first.rank()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let w = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * w..(o + 1) * w]);
        }
    }
    Tensor::new(shape, data)
}

/// Slices `[start, start+len)` of `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (start..start + len).collect();
    select(x, axis, &idx)
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

/// Softmax over the last axis. With `causal`, query row `i` (second-to-last
/// axis) only sees keys `j <= i + (n_keys - n_queries)`; masked entries are
/// exactly zero.
pub fn softmax(x: &Tensor, causal: bool) -> Result<Tensor> {
    let n = *x.shape().last().ok_or(TensorError::InvalidArgument {
        op: "softmax",
        msg: "rank-0 input".into(),
    })?;
    let nq = if causal {
        if x.rank() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: "causal softmax needs rank >= 2".into(),
            });
        }
        x.shape()[x.rank() - 2]
    } else {
        1
    };
    if causal && nq > n {
        return Err(TensorError::InvalidArgument {
            op: "softmax",
            msg: format!("more queries ({nq}) than keys ({n})"),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    if n == 0 {
        return Ok(out);
    }
    for (r, (src, dst)) in x.data().chunks(n).zip(out.data_mut().chunks_mut(n)).enumerate() {
        let visible = if causal { r % nq + (n - nq) + 1 } else { n };
        let max = src[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst[..visible].iter_mut().zip(&src[..visible]) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst[..visible].iter_mut() {
            *d /= total;
        }
    }
    Ok(out)
}

pub fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap_or(&1);
    let mut out = Tensor::zeros(y.shape());
    if n == 0 {
        return out;
    }
    for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(out.data_mut().chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    out
}

/// Per-row `(mean, 1/sqrt(var + eps))` over the last axis.
pub fn layer_norm_stats(x: &Tensor, eps: f64) -> Vec<(f64, f64)> {
    let n = *x.shape().last().unwrap_or(&1);
    x.data()
        .chunks(n.max(1))
        .map(|row| {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

/// Layer normalisation over the last axis, without scale or shift.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let n = *x.shape().last().ok_or(TensorError::InvalidArgument {
        op: "layer_norm",
        msg: "rank-0 input".into(),
    })?;
    let stats = layer_norm_stats(x, eps);
    let mut out = Tensor::zeros(x.shape());
    for ((row, dst), &(mean, inv)) in x.data().chunks(n).zip(out.data_mut().chunks_mut(n)).zip(&stats) {
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * inv;
        }
    }
    Ok(out)
}

pub fn layer_norm_backward(x: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let n = *x.shape().last().unwrap_or(&1);
    let stats = layer_norm_stats(x, eps);
    let mut out = Tensor::zeros(x.shape());
    for (((row, gr), dst), &(mean, inv)) in x
        .data()
        .chunks(n)
        .zip(g.data().chunks(n))
        .zip(out.data_mut().chunks_mut(n))
        .zip(&stats)
    {
        let g_mean = gr.iter().sum::<f64>() / n as f64;
        let gx_mean = row.iter().zip(gr).map(|(&v, &gv)| (v - mean) * inv * gv).sum::<f64>() / n as f64;
        for ((d, &v), &gv) in dst.iter_mut().zip(row).zip(gr) {
            let xhat = (v - mean) * inv;
            *d = inv * (gv - g_mean - xhat * gx_mean);
        }
    }
    out
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
    cdf + v * FRAC_1_SQRT_2PI * (-0.5 * v * v).exp()
}

pub fn embedding(table: &Tensor, ids: &[usize], ids_shape: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "embedding",
            msg: format!("table must be rank 2, got {:?}", table.shape()),
        });
    }
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    if ids_shape.iter().product::<usize>() != ids.len() {
        return Err(TensorError::InvalidArgument {
            op: "embedding",
            msg: format!("ids shape {ids_shape:?} does not hold {} ids", ids.len()),
        });
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("token id {id} out of range for vocabulary {vocab}"),
            });
        }
        data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    let mut shape = ids_shape.to_vec();
    shape.push(d);
    Tensor::new(shape, data)
}

/// Mean cross-entropy of `logits` (N×V) against `targets` (N).
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (rows, v) = ce_dims(logits, targets)?;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate().take(rows) {
        let row = &logits.data()[r * v..(r + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / rows as f64)
}

pub fn cross_entropy_backward(logits: &Tensor, targets: &[usize], g: f64) -> Result<Tensor> {
    let (rows, v) = ce_dims(logits, targets)?;
    let probs = softmax(logits, false)?;
    let mut out = probs;
    let scale = g / rows as f64;
    for (r, &t) in targets.iter().enumerate() {
        let row = &mut out.data_mut()[r * v..(r + 1) * v];
        row[t] -= 1.0;
        for x in row.iter_mut() {
            *x *= scale;
        }
    }
    Ok(out)
}

fn ce_dims(logits: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() || targets.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "cross_entropy",
            msg: format!("logits {:?} vs {} targets", logits.shape(), targets.len()),
        });
    }
    let v = logits.shape()[1];
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(TensorError::InvalidArgument {
            op: "cross_entropy",
            msg: format!("target {bad} out of range for {v} classes"),
        });
    }
    Ok((targets.len(), v))
}
