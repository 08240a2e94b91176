// SPDX-License-Identifier: MIT OR Apache-2.0

//! Expression graph with eager evaluation and reverse-mode differentiation.
//!
//! Nodes are appended in topological order. Building an op whose inputs
//! already hold values evaluates it immediately, so the graph doubles as a
//! define-by-run tape. [`Graph::forward`] re-evaluates every node from a new
//! set of leaf bindings, and [`Graph::backward`] walks the nodes in reverse.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients of trainable leaves, keyed by leaf handle.
pub type GradMap = BTreeMap<Var, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax { x: Var, causal: bool },
    LayerNorm { x: Var, eps: f64 },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize>, ids_shape: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Select { x: Var, axis: usize, indices: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(..) => "sum_all",
            Op::Select { .. } => "select",
            Op::Concat { .. } => "concat",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Gelu(x)
            | Op::SumAll(x)
            | Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Select { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    // -- leaves ------------------------------------------------------------

    /// Trainable leaf bound to `value`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.shape().to_vec(), Some(value), true)
    }

    /// Constant leaf bound to `value`; gradients are not reported for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value.shape().to_vec(), Some(value), false)
    }

    /// Unbound leaf; it must be bound through [`Graph::forward`].
    pub fn placeholder(&mut self, shape: &[usize], trainable: bool) -> Var {
        self.leaf(shape.to_vec(), None, trainable)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Option<Tensor>, trainable: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf { trainable }, shape, value });
        Var(self.nodes.len() - 1)
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        matches!(self.nodes.get(v.0), Some(Node { op: Op::Leaf { trainable: true }, .. }))
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.node(v)?.value.as_ref().ok_or(TensorError::Unevaluated(v.0))
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownNode(v.0))
    }

    // -- ops -----------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(x, c))
    }

    /// Batched matrix product over the last two axes, broadcasting the
    /// leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = self.shape(x)?.iter().product();
        if numel != shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x)?.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.push_shaped(Op::Reshape(x), shape.to_vec())
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.push(Op::Permute(x, perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x)?.len();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("rank {rank} < 2"),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax { x, causal: false })
    }

    /// Softmax over the last axis with a lower-triangular visibility mask.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax { x, causal: true })
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, eps })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        self.push(Op::Embedding { table, ids: ids.to_vec(), ids_shape: ids_shape.to_vec() })
    }

    /// Mean cross-entropy of N×V logits against N target classes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, targets: targets.to_vec() })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::SumAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SumAll(x))
    }

    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.push(Op::Select { x, axis, indices: indices.to_vec() })
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select(x, axis, &idx)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.push(Op::Concat { xs: xs.to_vec(), axis })
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let shape = self.infer_shape(&op)?;
        self.push_shaped(op, shape)
    }

    fn push_shaped(&mut self, op: Op, shape: Vec<usize>) -> Result<Var> {
        for v in op.inputs() {
            self.node(v)?;
        }
        let ready = op.inputs().iter().all(|v| self.nodes[v.0].value.is_some());
        let value = if ready { Some(self.compute(&op, &shape)?) } else { None };
        self.nodes.push(Node { op, shape, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn infer_shape(&self, op: &Op) -> Result<Vec<usize>> {
        let sh = |v: &Var| self.shape(*v).map(|s| s.to_vec());
        Ok(match op {
            Op::Leaf { .. } | Op::Reshape(_) => unreachable!("shape supplied by caller"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                kernels::broadcast_shape(&sh(a)?, &sh(b)?, op.name())?
            }
            Op::Scale(x, _) | Op::Gelu(x) => sh(x)?,
            Op::Softmax { x, .. } | Op::LayerNorm { x, .. } => {
                let s = sh(x)?;
                if s.is_empty() {
                    return Err(TensorError::InvalidArgument { op: op.name(), msg: "rank-0 input".into() });
                }
                s
            }
            Op::MatMul(a, b) => kernels::matmul_plan(&sh(a)?, &sh(b)?)?.out_shape,
            Op::Permute(x, perm) => {
                let s = sh(x)?;
                let mut seen = vec![false; s.len()];
                if perm.len() != s.len()
                    || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
                {
                    return Err(TensorError::InvalidArgument {
                        op: "permute",
                        msg: format!("{perm:?} is not a permutation of rank {}", s.len()),
                    });
                }
                perm.iter().map(|&p| s[p]).collect()
            }
            Op::Embedding { table, ids, ids_shape } => {
                let t = sh(table)?;
                if t.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
                    return Err(TensorError::InvalidArgument {
                        op: "embedding",
                        msg: format!("table {t:?}, ids shape {ids_shape:?} for {} ids", ids.len()),
                    });
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= t[0]) {
                    return Err(TensorError::InvalidArgument {
                        op: "embedding",
                        msg: format!("token id {bad} out of range for vocabulary {}", t[0]),
                    });
                }
                let mut s = ids_shape.clone();
                s.push(t[1]);
                s
            }
            Op::CrossEntropy { logits, targets } => {
                let s = sh(logits)?;
                if s.len() != 2 || s[0] != targets.len() || targets.is_empty() {
                    return Err(TensorError::InvalidArgument {
                        op: "cross_entropy",
                        msg: format!("logits {s:?} vs {} targets", targets.len()),
                    });
                }
                Vec::new()
            }
            Op::SumAxis { x, axis } => {
                let mut s = sh(x)?;
                if *axis >= s.len() {
                    return Err(TensorError::InvalidArgument {
                        op: "sum_axis",
                        msg: format!("axis {axis} out of range for {s:?}"),
                    });
                }
                s.remove(*axis);
                s
            }
            Op::SumAll(_) => Vec::new(),
            Op::Select { x, axis, indices } => {
                let mut s = sh(x)?;
                if *axis >= s.len() || indices.iter().any(|&i| i >= s[*axis]) {
                    return Err(TensorError::InvalidArgument {
                        op: "select",
                        msg: format!("indices {indices:?} invalid for axis {axis} of {s:?}"),
                    });
                }
                s[*axis] = indices.len();
                s
            }
            Op::Concat { xs, axis } => {
                let shapes = xs.iter().map(sh).collect::<Result<Vec<_>>>()?;
                let first = shapes.first().ok_or(TensorError::InvalidArgument {
                    op: "concat",
                    msg: "no inputs".into(),
                })?;
                if *axis >= first.len() {
                    return Err(TensorError::InvalidArgument {
                        op: "concat",
                        msg: format!("axis {axis} out of range for {first:?}"),
                    });
                }
                let mut out = first.clone();
                out[*axis] = 0;
                for s in &shapes {
                    let ok = s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                    if !ok {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            lhs: first.clone(),
                            rhs: s.clone(),
                        });
                    }
                    out[*axis] += s[*axis];
                }
                out
            }
        })
    }

    fn compute(&self, op: &Op, shape: &[usize]) -> Result<Tensor> {
        let val = |v: &Var| self.value(*v);
        let out = match op {
            Op::Leaf { .. } => unreachable!("leaves are bound, not computed"),
            Op::Add(a, b) => kernels::broadcast_binary(val(a)?, val(b)?, "add", |x, y| x + y)?,
            Op::Sub(a, b) => kernels::broadcast_binary(val(a)?, val(b)?, "sub", |x, y| x - y)?,
            Op::Mul(a, b) => kernels::broadcast_binary(val(a)?, val(b)?, "mul", |x, y| x * y)?,
            Op::Scale(x, c) => val(x)?.map(|v| v * c),
            Op::MatMul(a, b) => kernels::matmul(val(a)?, val(b)?)?,
            Op::Reshape(x) => val(x)?.reshape(shape)?,
            Op::Permute(x, perm) => kernels::permute(val(x)?, perm)?,
            Op::Softmax { x, causal } => kernels::softmax(val(x)?, *causal)?,
            Op::LayerNorm { x, eps } => kernels::layer_norm(val(x)?, *eps)?,
            Op::Gelu(x) => val(x)?.map(kernels::gelu),
            Op::Embedding { table, ids, ids_shape } => kernels::embedding(val(table)?, ids, ids_shape)?,
            Op::CrossEntropy { logits, targets } => {
                Tensor::scalar(kernels::cross_entropy(val(logits)?, targets)?)
            }
            Op::SumAxis { x, axis } => kernels::sum_axis(val(x)?, *axis)?,
            Op::SumAll(x) => Tensor::scalar(val(x)?.sum()),
            Op::Select { x, axis, indices } => kernels::select(val(x)?, *axis, indices)?,
            Op::Concat { xs, axis } => {
                let vals = xs.iter().map(val).collect::<Result<Vec<_>>>()?;
                kernels::concat(&vals, *axis)?
            }
        };
        debug_assert_eq!(out.shape(), shape, "{} produced an unexpected shape", op.name());
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        Ok(out)
    }

    // -- evaluation ------------------------------------------------------------

    /// Rebinds the given leaves and re-evaluates the whole graph, returning
    /// the value of `output`. Leaves not mentioned keep their current value.
    pub fn forward(&mut self, bindings: &[(Var, Tensor)], output: Var) -> Result<Tensor> {
        for (v, t) in bindings {
            let node = self.nodes.get_mut(v.0).ok_or(TensorError::UnknownNode(v.0))?;
            if !matches!(node.op, Op::Leaf { .. }) {
                return Err(TensorError::InvalidArgument {
                    op: "forward",
                    msg: format!("node {} is not a leaf", v.0),
                });
            }
            if node.shape != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "forward",
                    lhs: node.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            node.value = Some(t.clone());
        }
        self.node(output)?;
        for i in 0..self.nodes.len() {
            if let Op::Leaf { .. } = self.nodes[i].op {
                if self.nodes[i].value.is_none() {
                    return Err(TensorError::Unbound(i));
                }
                continue;
            }
            let node = &self.nodes[i];
            let value = self.compute(&node.op, &node.shape)?;
            self.nodes[i].value = Some(value);
        }
        Ok(self.value(output)?.clone())
    }

    /// Gradients of `seed · output` with respect to every trainable leaf.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<GradMap> {
        self.backward_inner(output, seed, None)
    }

    fn backward_inner(&self, output: Var, seed: &Tensor, extra: Option<Var>) -> Result<GradMap> {
        let out_node = self.node(output)?;
        if out_node.value.is_none() {
            return Err(TensorError::Unevaluated(output.0));
        }
        if seed.shape() != out_node.shape {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: out_node.shape.clone(),
                rhs: seed.shape().to_vec(),
            });
        }
        let wanted = |i: usize| {
            matches!(self.nodes[i].op, Op::Leaf { trainable: true }) || extra == Some(Var(i))
        };
        let mut needs = vec![false; self.nodes.len()];
        for i in 0..=output.0 {
            needs[i] = wanted(i) || self.nodes[i].op.inputs().iter().any(|v| needs[v.0]);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            if !needs[i] || matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.input_grads(i, &g, &needs)? {
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        let mut map = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if wanted(i) {
                let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(&node.shape));
                map.insert(Var(i), g);
            }
        }
        Ok(map)
    }

    /// Vector-Jacobian products of node `i` for each input that needs one.
    fn input_grads(&self, i: usize, g: &Tensor, needs: &[bool]) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: &Var| self.value(*v);
        let need = |v: &Var| needs[v.0];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if need(a) {
                    out.push((*a, kernels::reduce_to(g, &self.nodes[a.0].shape)));
                }
                if need(b) {
                    out.push((*b, kernels::reduce_to(g, &self.nodes[b.0].shape)));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((*a, kernels::reduce_to(g, &self.nodes[a.0].shape)));
                }
                if need(b) {
                    out.push((*b, kernels::reduce_to(&g.map(|v| -v), &self.nodes[b.0].shape)));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    let ga = kernels::broadcast_binary(g, val(b)?, "mul", |x, y| x * y)?;
                    out.push((*a, kernels::reduce_to(&ga, &self.nodes[a.0].shape)));
                }
                if need(b) {
                    let gb = kernels::broadcast_binary(g, val(a)?, "mul", |x, y| x * y)?;
                    out.push((*b, kernels::reduce_to(&gb, &self.nodes[b.0].shape)));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * c))),
            Op::MatMul(a, b) => {
                let (ga, gb) = kernels::matmul_backward(val(a)?, val(b)?, g)?;
                if need(a) {
                    out.push((*a, ga));
                }
                if need(b) {
                    out.push((*b, gb));
                }
            }
            Op::Reshape(x) => out.push((*x, g.reshape(&self.nodes[x.0].shape)?)),
            Op::Permute(x, perm) => {
                out.push((*x, kernels::permute(g, &kernels::inverse_permutation(perm))?))
            }
            Op::Softmax { x, .. } => {
                let y = node.value.as_ref().ok_or(TensorError::Unevaluated(i))?;
                out.push((*x, kernels::softmax_backward(y, g)));
            }
            Op::LayerNorm { x, eps } => out.push((*x, kernels::layer_norm_backward(val(x)?, g, *eps))),
            Op::Gelu(x) => {
                let gx = kernels::broadcast_binary(g, val(x)?, "gelu", |gv, xv| gv * kernels::gelu_grad(xv))?;
                out.push((*x, gx));
            }
            Op::Embedding { table, ids, .. } => {
                let t = &self.nodes[table.0].shape;
                let d = t[1];
                let mut gt = Tensor::zeros(t);
                let gd = gt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, &src) in gd[id * d..(id + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *dst += src;
                    }
                }
                out.push((*table, gt));
            }
            Op::CrossEntropy { logits, targets } => {
                out.push((*logits, kernels::cross_entropy_backward(val(logits)?, targets, g.item()?)?))
            }
            Op::SumAxis { x, axis } => {
                let len = self.nodes[x.0].shape[*axis];
                out.push((*x, kernels::expand_axis(g, *axis, len)?));
            }
            Op::SumAll(x) => out.push((*x, Tensor::full(&self.nodes[x.0].shape, g.item()?))),
            Op::Select { x, axis, indices } => {
                out.push((*x, kernels::select_backward(g, &self.nodes[x.0].shape, *axis, indices)))
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for x in xs {
                    let len = self.nodes[x.0].shape[*axis];
                    if need(x) {
                        out.push((*x, kernels::narrow(g, *axis, start, len)?));
                    }
                    start += len;
                }
            }
        }
        Ok(out)
    }

    /// Largest per-coordinate relative error between the analytic gradient of
    /// a scalar `output` with respect to `leaf` and a central finite
    /// difference with step `eps`:
    /// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub fn grad_check(&mut self, output: Var, leaf: Var, eps: f64) -> Result<f64> {
        let out_shape = self.node(output)?.shape.clone();
        if !out_shape.is_empty() && out_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalar(out_shape));
        }
        if !matches!(self.node(leaf)?.op, Op::Leaf { .. }) {
            return Err(TensorError::InvalidArgument {
                op: "grad_check",
                msg: format!("node {} is not a leaf", leaf.0),
            });
        }
        self.forward(&[], output)?;
        let seed = Tensor::ones(&out_shape);
        let analytic = self
            .backward_inner(output, &seed, Some(leaf))?
            .remove(&leaf)
            .unwrap_or_else(|| Tensor::zeros(&self.nodes[leaf.0].shape));
        let base = self.value(leaf)?.clone();
        let mut worst: f64 = 0.0;
        for c in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[c] += eps;
            let f_plus = self.forward(&[(leaf, plus)], output)?.item()?;
            let mut minus = base.clone();
            minus.data_mut()[c] -= eps;
            let f_minus = self.forward(&[(leaf, minus)], output)?.item()?;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.data()[c];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12));
        }
        self.forward(&[(leaf, base)], output)?;
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert!(grads[&x].bit_eq(&Tensor::ones(&[2, 3])));
    }

    #[test]
    fn product_gradient_is_other_factor() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let y = g.param(Tensor::from_vec(vec![3.0, 4.0, -1.5]));
        let p = g.mul(x, y).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads[&x].data(), &[3.0, 4.0, -1.5]);
        assert_eq!(grads[&y].data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn forward_rebinds_placeholders() {
        let mut g = Graph::new();
        let x = g.placeholder(&[2], false);
        let y = g.scale(x, 2.0).unwrap();
        assert!(g.value(y).is_err());
        let out = g.forward(&[(x, Tensor::from_vec(vec![1.0, 2.0]))], y).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
        let mut g2 = Graph::new();
        let p = g2.placeholder(&[1], false);
        let q = g2.gelu(p).unwrap();
        assert_eq!(g2.forward(&[], q), Err(TensorError::Unbound(0)));
    }

    #[test]
    fn backward_requires_evaluation_and_matching_seed() {
        let mut g = Graph::new();
        let x = g.placeholder(&[2], true);
        let y = g.sum_all(x).unwrap();
        assert!(matches!(g.backward(y, &Tensor::scalar(1.0)), Err(TensorError::Unevaluated(_))));
        g.forward(&[(x, Tensor::zeros(&[2]))], y).unwrap();
        assert!(matches!(g.backward(y, &Tensor::zeros(&[2])), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![f64::MAX, f64::MAX]));
        assert_eq!(g.add(x, x), Err(TensorError::NonFinite { op: "add" }));
    }

    #[test]
    fn grad_check_linear_and_constant() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_vec(vec![0.3, -1.2, 2.0]));
        let x = g.input(Tensor::from_vec(vec![1.5, 0.25, -0.75]));
        let p = g.mul(w, x).unwrap();
        let y = g.sum_all(p).unwrap();
        assert!(g.grad_check(y, w, 1e-4).unwrap() < 1e-9);

        let c = g.sum_all(x).unwrap();
        assert_eq!(g.grad_check(c, w, 1e-4).unwrap(), 0.0);

        assert!(matches!(g.grad_check(p, w, 1e-4), Err(TensorError::NonScalar(_))));
    }
}
