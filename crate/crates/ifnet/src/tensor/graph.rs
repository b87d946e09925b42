//! Eager operation tape with reverse replay.
//!
//! Every `add_*` constructor validates shapes, executes the operation
//! immediately and records it. `backward` walks the tape in exact reverse
//! order; `recompute` re-executes the whole tape after leaf values change
//! (the mechanism behind finite-difference checks). Selection indices
//! (gather coordinates, max/min tie-breaks) recorded at construction stay
//! frozen across recomputes, so a perturbed replay measures the same
//! smooth branch the backward pass differentiates.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Norm floor for row-wise L2 normalization.
pub const L2_NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Conv2d { input: ValueId, weight: ValueId, bias: ValueId, stride: usize, pad: usize },
    Linear { input: ValueId, weight: ValueId, bias: ValueId },
    BatchNorm { input: ValueId, eps: S, train: bool, mean: Vec<S>, var: Vec<S> },
    Relu { input: ValueId },
    L2NormalizeRows { input: ValueId },
    SumAll { input: ValueId },
    MeanAll { input: ValueId },
    MaxAll { input: ValueId, arg: usize },
    MinAll { input: ValueId, arg: usize },
    PairwiseSqDist { left: ValueId, right: ValueId },
    SqrtEps { input: ValueId, eps: S },
    Gather2d { input: ValueId, coords: Vec<(usize, usize)> },
    SliceRows { input: ValueId, start: usize, count: usize },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    AddScalar { input: ValueId, c: S },
    MulScalar { input: ValueId, c: S },
    Reshape { input: ValueId },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::MaxAll { .. } => "max",
            Op::MinAll { .. } => "min",
            Op::PairwiseSqDist { .. } => "pairwise_sqdist",
            Op::SqrtEps { .. } => "sqrt_eps",
            Op::Gather2d { .. } => "gather2d",
            Op::SliceRows { .. } => "slice_rows",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op<S>,
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Recorded computation. Exclusively owned during forward/backward.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    dirty: bool,
}

fn mismatch(op: &str, detail: String) -> Error {
    Error::ShapeMismatch { op: op.into(), detail }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), dirty: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: ValueId) -> &[S] {
        &self.nodes[id.0].values
    }

    /// Accumulated gradient of a node; `None` until backward has run
    /// through it.
    pub fn grad(&self, id: ValueId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable input (parameters, patch batches under test).
    pub fn leaf_grad(&mut self, t: &Tensor<S>) -> ValueId {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), true)
    }

    /// Non-differentiable input (constants, detached weights).
    pub fn leaf(&mut self, t: &Tensor<S>) -> ValueId {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<S>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(mismatch("constant", format!("shape {:?} vs {} values", shape, values.len())));
        }
        Ok(self.push_leaf(shape, values, false))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, values: Vec<S>, requires_grad: bool) -> ValueId {
        self.nodes.push(Node { op: Op::Leaf, shape, values, requires_grad, grad: None });
        ValueId(self.nodes.len() - 1)
    }

    /// Overwrites a leaf's values. Marks the graph stale until `recompute`.
    pub fn set_leaf(&mut self, id: ValueId, values: &[S]) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(mismatch("set_leaf", "target is not a leaf".into()));
        }
        if node.values.len() != values.len() {
            return Err(mismatch(
                "set_leaf",
                format!("leaf has {} values, got {}", node.values.len(), values.len()),
            ));
        }
        node.values.copy_from_slice(values);
        self.dirty = true;
        Ok(())
    }

    /// Overwrites one coordinate of a leaf. Marks the graph stale.
    pub fn set_leaf_value(&mut self, id: ValueId, index: usize, value: S) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(mismatch("set_leaf_value", "target is not a leaf".into()));
        }
        node.values[index] = value;
        self.dirty = true;
        Ok(())
    }

    /// Re-executes every recorded operation in recording order. Frozen
    /// selections (gather coordinates) are kept; data-dependent saved
    /// state (batch statistics, arg indices) is refreshed.
    pub fn recompute(&mut self) {
        for idx in 0..self.nodes.len() {
            self.exec(idx);
        }
        self.dirty = false;
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn check_dims(&self, op: &str, id: ValueId, ndim: usize) -> Result<()> {
        let shape = &self.nodes[id.0].shape;
        if shape.len() != ndim {
            return Err(mismatch(op, format!("expected {}-d input, got shape {:?}", ndim, shape)));
        }
        Ok(())
    }

    fn push_op(&mut self, op: Op<S>, shape: Vec<usize>, requires_grad: bool) -> ValueId {
        let numel = shape.iter().product();
        self.nodes.push(Node { op, shape, values: vec![S::zero(); numel], requires_grad, grad: None });
        let idx = self.nodes.len() - 1;
        self.exec(idx);
        ValueId(idx)
    }

    fn any_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── op constructors ─────────────────────────────────────────────

    /// 2-d convolution over `[n, c_in, h, w]` with zero padding.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        self.check_dims("conv2d", input, 4)?;
        self.check_dims("conv2d", weight, 4)?;
        self.check_dims("conv2d", bias, 1)?;
        if stride == 0 {
            return Err(mismatch("conv2d", "stride must be >= 1".into()));
        }
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, wcin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wcin != cin {
            return Err(mismatch("conv2d", format!("input channels {} vs kernel channels {}", cin, wcin)));
        }
        if bshape[0] != cout {
            return Err(mismatch("conv2d", format!("bias len {} vs out channels {}", bshape[0], cout)));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push_op(Op::Conv2d { input, weight, bias, stride, pad }, vec![n, cout, ho, wo], rg))
    }

    /// Affine map `x W^T + b` over `[n, d_in]`.
    pub fn linear(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        self.check_dims("linear", input, 2)?;
        self.check_dims("linear", weight, 2)?;
        self.check_dims("linear", bias, 1)?;
        let (n, din) = (self.shape(input)[0], self.shape(input)[1]);
        let (dout, wdin) = (self.shape(weight)[0], self.shape(weight)[1]);
        if wdin != din {
            return Err(mismatch("linear", format!("input dim {} vs weight dim {}", din, wdin)));
        }
        if self.shape(bias)[0] != dout {
            return Err(mismatch("linear", format!("bias len {} vs out dim {}", self.shape(bias)[0], dout)));
        }
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push_op(Op::Linear { input, weight, bias }, vec![n, dout], rg))
    }

    /// Per-channel batch normalization over `[n, c, h, w]`, no learnable
    /// affine. In train mode batch statistics are computed and saved; in
    /// eval mode the supplied running statistics are treated as constants.
    pub fn batch_norm(
        &mut self,
        input: ValueId,
        eps: S,
        running: Option<(&[S], &[S])>,
    ) -> Result<ValueId> {
        self.check_dims("batch_norm", input, 4)?;
        let c = self.shape(input)[1];
        let (train, mean, var) = match running {
            None => (true, vec![S::zero(); c], vec![S::one(); c]),
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(mismatch(
                        "batch_norm",
                        format!("running stats len {}/{} vs {} channels", m.len(), v.len(), c),
                    ));
                }
                (false, m.to_vec(), v.to_vec())
            }
        };
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input]);
        Ok(self.push_op(Op::BatchNorm { input, eps, train, mean, var }, shape, rg))
    }

    /// Batch statistics saved by a train-mode batch_norm node.
    pub fn bn_batch_stats(&self, id: ValueId) -> Option<(&[S], &[S])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { train: true, mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input]);
        self.push_op(Op::Relu { input }, shape, rg)
    }

    /// Row-wise `x / max(‖x‖, 1e-12)` over `[n, d]`.
    pub fn l2_normalize_rows(&mut self, input: ValueId) -> Result<ValueId> {
        self.check_dims("l2_normalize_rows", input, 2)?;
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input]);
        Ok(self.push_op(Op::L2NormalizeRows { input }, shape, rg))
    }

    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let rg = self.any_grad(&[input]);
        self.push_op(Op::SumAll { input }, vec![1], rg)
    }

    pub fn mean_all(&mut self, input: ValueId) -> Result<ValueId> {
        if self.nodes[input.0].values.is_empty() {
            return Err(mismatch("mean", "empty input".into()));
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push_op(Op::MeanAll { input }, vec![1], rg))
    }

    /// Max over all elements; backward routes the subgradient to the
    /// lowest linear index achieving the max.
    pub fn max_all(&mut self, input: ValueId) -> Result<ValueId> {
        if self.nodes[input.0].values.is_empty() {
            return Err(mismatch("max", "empty input".into()));
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push_op(Op::MaxAll { input, arg: 0 }, vec![1], rg))
    }

    /// Min over all elements; ties resolved to the lowest linear index.
    pub fn min_all(&mut self, input: ValueId) -> Result<ValueId> {
        if self.nodes[input.0].values.is_empty() {
            return Err(mismatch("min", "empty input".into()));
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push_op(Op::MinAll { input, arg: 0 }, vec![1], rg))
    }

    /// Squared L2 distances between all row pairs: `[n, d] x [m, d] -> [n, m]`.
    pub fn pairwise_sqdist(&mut self, left: ValueId, right: ValueId) -> Result<ValueId> {
        self.check_dims("pairwise_sqdist", left, 2)?;
        self.check_dims("pairwise_sqdist", right, 2)?;
        let (n, dl) = (self.shape(left)[0], self.shape(left)[1]);
        let (m, dr) = (self.shape(right)[0], self.shape(right)[1]);
        if dl != dr {
            return Err(Error::DimMismatch { left: dl, right: dr });
        }
        let rg = self.any_grad(&[left, right]);
        Ok(self.push_op(Op::PairwiseSqDist { left, right }, vec![n, m], rg))
    }

    /// Elementwise `sqrt(x + eps)`; `eps > 0` keeps the derivative finite
    /// at zero distance.
    pub fn sqrt_eps(&mut self, input: ValueId, eps: S) -> Result<ValueId> {
        if eps <= S::zero() {
            return Err(mismatch("sqrt_eps", "eps must be positive".into()));
        }
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input]);
        Ok(self.push_op(Op::SqrtEps { input, eps }, shape, rg))
    }

    /// Picks entries `[row, col]` of a matrix into a vector, in order.
    pub fn gather2d(&mut self, input: ValueId, coords: Vec<(usize, usize)>) -> Result<ValueId> {
        self.check_dims("gather2d", input, 2)?;
        let (r, c) = (self.shape(input)[0], self.shape(input)[1]);
        for &(ri, ci) in &coords {
            if ri >= r || ci >= c {
                return Err(mismatch("gather2d", format!("coord ({}, {}) outside {}x{}", ri, ci, r, c)));
            }
        }
        let k = coords.len();
        let rg = self.any_grad(&[input]);
        Ok(self.push_op(Op::Gather2d { input, coords }, vec![k], rg))
    }

    /// Contiguous row slice of a `[n, d]` matrix.
    pub fn slice_rows(&mut self, input: ValueId, start: usize, count: usize) -> Result<ValueId> {
        self.check_dims("slice_rows", input, 2)?;
        let (n, d) = (self.shape(input)[0], self.shape(input)[1]);
        if start + count > n {
            return Err(mismatch("slice_rows", format!("rows {}..{} outside {} rows", start, start + count, n)));
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push_op(Op::SliceRows { input, start, count }, vec![count, d], rg))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("add", a, b)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push_op(Op::Add { a, b }, shape, rg))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("sub", a, b)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push_op(Op::Sub { a, b }, shape, rg))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("mul", a, b)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push_op(Op::Mul { a, b }, shape, rg))
    }

    pub fn add_scalar(&mut self, input: ValueId, c: S) -> ValueId {
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input]);
        self.push_op(Op::AddScalar { input, c }, shape, rg)
    }

    pub fn mul_scalar(&mut self, input: ValueId, c: S) -> ValueId {
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input]);
        self.push_op(Op::MulScalar { input, c }, shape, rg)
    }

    /// Same values, new shape; element count must match.
    pub fn reshape(&mut self, input: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[input.0].values.len() {
            return Err(mismatch(
                "reshape",
                format!("shape {:?} vs {} values", shape, self.nodes[input.0].values.len()),
            ));
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push_op(Op::Reshape { input }, shape, rg))
    }

    fn same_shape(&self, op: &str, a: ValueId, b: ValueId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    // ── execution ───────────────────────────────────────────────────

    fn exec(&mut self, idx: usize) {
        let (before, rest) = self.nodes.split_at_mut(idx);
        let node = &mut rest[0];
        let out = &mut node.values;
        match &mut node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let x = &before[input.0];
                let w = &before[weight.0];
                let b = &before[bias.0].values;
                conv2d_forward(&x.values, &x.shape, &w.values, &w.shape, b, *stride, *pad, out, &node.shape);
            }
            Op::Linear { input, weight, bias } => {
                let x = &before[input.0];
                let w = &before[weight.0];
                let b = &before[bias.0].values;
                let (n, din) = (x.shape[0], x.shape[1]);
                let dout = w.shape[0];
                for i in 0..n {
                    let xr = &x.values[i * din..(i + 1) * din];
                    for o in 0..dout {
                        let wr = &w.values[o * din..(o + 1) * din];
                        let mut acc = b[o];
                        for k in 0..din {
                            acc = acc + xr[k] * wr[k];
                        }
                        out[i * dout + o] = acc;
                    }
                }
            }
            Op::BatchNorm { input, eps, train, mean, var } => {
                let x = &before[input.0];
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let plane = h * w;
                if *train {
                    let count = S::from_f64((n * plane) as f64);
                    for ch in 0..c {
                        let mut s = S::zero();
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for p in 0..plane {
                                s = s + x.values[base + p];
                            }
                        }
                        let m = s / count;
                        let mut v = S::zero();
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for p in 0..plane {
                                let d = x.values[base + p] - m;
                                v = v + d * d;
                            }
                        }
                        mean[ch] = m;
                        var[ch] = v / count;
                    }
                }
                for ch in 0..c {
                    let inv = S::one() / (var[ch] + *eps).sqrt();
                    let m = mean[ch];
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for p in 0..plane {
                            out[base + p] = (x.values[base + p] - m) * inv;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                for (o, &v) in out.iter_mut().zip(&before[input.0].values) {
                    *o = if v > S::zero() { v } else { S::zero() };
                }
            }
            Op::L2NormalizeRows { input } => {
                let x = &before[input.0];
                let (n, d) = (x.shape[0], x.shape[1]);
                let floor = S::from_f64(L2_NORM_EPS);
                for i in 0..n {
                    let row = &x.values[i * d..(i + 1) * d];
                    let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
                    let denom = if norm > floor { norm } else { floor };
                    for k in 0..d {
                        out[i * d + k] = row[k] / denom;
                    }
                }
            }
            Op::SumAll { input } => {
                out[0] = before[input.0].values.iter().copied().sum();
            }
            Op::MeanAll { input } => {
                let v = &before[input.0].values;
                out[0] = v.iter().copied().sum::<S>() / S::from_f64(v.len() as f64);
            }
            Op::MaxAll { input, arg } => {
                let v = &before[input.0].values;
                let mut best = 0usize;
                for (i, &x) in v.iter().enumerate() {
                    if x > v[best] {
                        best = i;
                    }
                }
                *arg = best;
                out[0] = v[best];
            }
            Op::MinAll { input, arg } => {
                let v = &before[input.0].values;
                let mut best = 0usize;
                for (i, &x) in v.iter().enumerate() {
                    if x < v[best] {
                        best = i;
                    }
                }
                *arg = best;
                out[0] = v[best];
            }
            Op::PairwiseSqDist { left, right } => {
                let l = &before[left.0];
                let r = &before[right.0];
                let (n, d) = (l.shape[0], l.shape[1]);
                let m = r.shape[0];
                for i in 0..n {
                    let li = &l.values[i * d..(i + 1) * d];
                    for j in 0..m {
                        let rj = &r.values[j * d..(j + 1) * d];
                        let mut acc = S::zero();
                        for k in 0..d {
                            let diff = li[k] - rj[k];
                            acc = acc + diff * diff;
                        }
                        out[i * m + j] = acc;
                    }
                }
            }
            Op::SqrtEps { input, eps } => {
                for (o, &v) in out.iter_mut().zip(&before[input.0].values) {
                    *o = (v + *eps).sqrt();
                }
            }
            Op::Gather2d { input, coords } => {
                let x = &before[input.0];
                let c = x.shape[1];
                for (o, &(ri, ci)) in out.iter_mut().zip(coords.iter()) {
                    *o = x.values[ri * c + ci];
                }
            }
            Op::SliceRows { input, start, count } => {
                let x = &before[input.0];
                let d = x.shape[1];
                out.copy_from_slice(&x.values[*start * d..(*start + *count) * d]);
            }
            Op::Add { a, b } => {
                for ((o, &x), &y) in out.iter_mut().zip(&before[a.0].values).zip(&before[b.0].values) {
                    *o = x + y;
                }
            }
            Op::Sub { a, b } => {
                for ((o, &x), &y) in out.iter_mut().zip(&before[a.0].values).zip(&before[b.0].values) {
                    *o = x - y;
                }
            }
            Op::Mul { a, b } => {
                for ((o, &x), &y) in out.iter_mut().zip(&before[a.0].values).zip(&before[b.0].values) {
                    *o = x * y;
                }
            }
            Op::AddScalar { input, c } => {
                for (o, &v) in out.iter_mut().zip(&before[input.0].values) {
                    *o = v + *c;
                }
            }
            Op::MulScalar { input, c } => {
                for (o, &v) in out.iter_mut().zip(&before[input.0].values) {
                    *o = v * *c;
                }
            }
            Op::Reshape { input } => {
                out.copy_from_slice(&before[input.0].values);
            }
        }
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulates `d(output)/d(node)` contracted with `seed` into every
    /// node on a differentiable path to `output`.
    pub fn backward(&mut self, output: ValueId, seed: &[S]) -> Result<()> {
        if self.dirty {
            return Err(Error::BackwardBeforeForward);
        }
        if seed.len() != self.nodes[output.0].values.len() {
            return Err(mismatch(
                "backward",
                format!("seed has {} values, output has {}", seed.len(), self.nodes[output.0].values.len()),
            ));
        }
        // Local adjoint buffers for the whole tape; leaf adjoints are
        // folded into the persistent per-node accumulators afterwards.
        let mut adj: Vec<Vec<S>> = self.nodes.iter().map(|n| vec![S::zero(); n.values.len()]).collect();
        adj[output.0].copy_from_slice(seed);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut adj[idx]);
            self.backward_op(idx, &g, &mut adj);
            adj[idx] = g;
        }
        for (node, a) in self.nodes.iter_mut().zip(adj.into_iter()) {
            if !node.requires_grad {
                continue;
            }
            match node.grad.as_mut() {
                Some(acc) => {
                    for (gi, ai) in acc.iter_mut().zip(&a) {
                        *gi = *gi + *ai;
                    }
                }
                None => node.grad = Some(a),
            }
        }
        Ok(())
    }

    /// Backward with a unit seed on a scalar output.
    pub fn backward_scalar(&mut self, output: ValueId) -> Result<()> {
        if self.nodes[output.0].values.len() != 1 {
            return Err(Error::NonScalarOutput { numel: self.nodes[output.0].values.len() });
        }
        self.backward(output, &[S::one()])
    }

    fn backward_op(&self, idx: usize, g: &[S], adj: &mut [Vec<S>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let x = &self.nodes[input.0];
                let w = &self.nodes[weight.0];
                // Split disjoint adjoint buffers without cloning.
                let (dx, dw, db) = three_mut(adj, input.0, weight.0, bias.0);
                conv2d_backward(
                    &x.values, &x.shape, &w.values, &w.shape, *stride, *pad, g, &node.shape, dx, dw, db,
                );
            }
            Op::Linear { input, weight, bias } => {
                let x = &self.nodes[input.0];
                let w = &self.nodes[weight.0];
                let (n, din) = (x.shape[0], x.shape[1]);
                let dout = w.shape[0];
                let (dx, dw, db) = three_mut(adj, input.0, weight.0, bias.0);
                for i in 0..n {
                    for o in 0..dout {
                        let go = g[i * dout + o];
                        if go == S::zero() {
                            continue;
                        }
                        db[o] = db[o] + go;
                        for k in 0..din {
                            dx[i * din + k] = dx[i * din + k] + go * w.values[o * din + k];
                            dw[o * din + k] = dw[o * din + k] + go * x.values[i * din + k];
                        }
                    }
                }
            }
            Op::BatchNorm { input, eps, train, mean, var } => {
                let x = &self.nodes[input.0];
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let plane = h * w;
                let dx = &mut adj[input.0];
                if *train {
                    // Full Jacobian through the batch statistics.
                    let count = S::from_f64((n * plane) as f64);
                    for ch in 0..c {
                        let inv = S::one() / (var[ch] + *eps).sqrt();
                        let m = mean[ch];
                        let mut sum_g = S::zero();
                        let mut sum_gx = S::zero();
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for p in 0..plane {
                                let xhat = (x.values[base + p] - m) * inv;
                                sum_g = sum_g + g[base + p];
                                sum_gx = sum_gx + g[base + p] * xhat;
                            }
                        }
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for p in 0..plane {
                                let xhat = (x.values[base + p] - m) * inv;
                                let d = inv * (g[base + p] - sum_g / count - xhat * sum_gx / count);
                                dx[base + p] = dx[base + p] + d;
                            }
                        }
                    }
                } else {
                    for ch in 0..c {
                        let inv = S::one() / (var[ch] + *eps).sqrt();
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for p in 0..plane {
                                dx[base + p] = dx[base + p] + g[base + p] * inv;
                            }
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let x = &self.nodes[input.0];
                let dx = &mut adj[input.0];
                for i in 0..g.len() {
                    if x.values[i] > S::zero() {
                        dx[i] = dx[i] + g[i];
                    }
                }
            }
            Op::L2NormalizeRows { input } => {
                let x = &self.nodes[input.0];
                let (n, d) = (x.shape[0], x.shape[1]);
                let floor = S::from_f64(L2_NORM_EPS);
                let dx = &mut adj[input.0];
                for i in 0..n {
                    let row = &x.values[i * d..(i + 1) * d];
                    let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
                    if norm > floor {
                        // dx = (g - y (g·y)) / norm with y = x / norm
                        let mut dot = S::zero();
                        for k in 0..d {
                            dot = dot + g[i * d + k] * row[k] / norm;
                        }
                        for k in 0..d {
                            let y = row[k] / norm;
                            dx[i * d + k] = dx[i * d + k] + (g[i * d + k] - y * dot) / norm;
                        }
                    } else {
                        for k in 0..d {
                            dx[i * d + k] = dx[i * d + k] + g[i * d + k] / floor;
                        }
                    }
                }
            }
            Op::SumAll { input } => {
                let dx = &mut adj[input.0];
                for v in dx.iter_mut() {
                    *v = *v + g[0];
                }
            }
            Op::MeanAll { input } => {
                let dx = &mut adj[input.0];
                let scale = g[0] / S::from_f64(dx.len() as f64);
                for v in dx.iter_mut() {
                    *v = *v + scale;
                }
            }
            Op::MaxAll { input, arg } | Op::MinAll { input, arg } => {
                adj[input.0][*arg] = adj[input.0][*arg] + g[0];
            }
            Op::PairwiseSqDist { left, right } => {
                let l = &self.nodes[left.0];
                let r = &self.nodes[right.0];
                let (n, d) = (l.shape[0], l.shape[1]);
                let m = r.shape[0];
                let two = S::from_f64(2.0);
                for i in 0..n {
                    let li = &l.values[i * d..(i + 1) * d];
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == S::zero() {
                            continue;
                        }
                        let rj = &r.values[j * d..(j + 1) * d];
                        for k in 0..d {
                            let diff = (li[k] - rj[k]) * two * gij;
                            adj[left.0][i * d + k] = adj[left.0][i * d + k] + diff;
                            adj[right.0][j * d + k] = adj[right.0][j * d + k] - diff;
                        }
                    }
                }
            }
            Op::SqrtEps { input, .. } => {
                let y = &node.values;
                let dx = &mut adj[input.0];
                let two = S::from_f64(2.0);
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] / (two * y[i]);
                }
            }
            Op::Gather2d { input, coords } => {
                let c = self.nodes[input.0].shape[1];
                let dx = &mut adj[input.0];
                for (k, &(ri, ci)) in coords.iter().enumerate() {
                    dx[ri * c + ci] = dx[ri * c + ci] + g[k];
                }
            }
            Op::SliceRows { input, start, count } => {
                let d = self.nodes[input.0].shape[1];
                let dx = &mut adj[input.0];
                for (offset, &gi) in g.iter().enumerate() {
                    let _ = count;
                    dx[*start * d + offset] = dx[*start * d + offset] + gi;
                }
            }
            Op::Add { a, b } => {
                for i in 0..g.len() {
                    adj[a.0][i] = adj[a.0][i] + g[i];
                    adj[b.0][i] = adj[b.0][i] + g[i];
                }
            }
            Op::Sub { a, b } => {
                for i in 0..g.len() {
                    adj[a.0][i] = adj[a.0][i] + g[i];
                    adj[b.0][i] = adj[b.0][i] - g[i];
                }
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                for i in 0..g.len() {
                    adj[a.0][i] = adj[a.0][i] + g[i] * bv[i];
                    adj[b.0][i] = adj[b.0][i] + g[i] * av[i];
                }
            }
            Op::AddScalar { input, .. } => {
                let dx = &mut adj[input.0];
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i];
                }
            }
            Op::MulScalar { input, c } => {
                let dx = &mut adj[input.0];
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] * *c;
                }
            }
            Op::Reshape { input } => {
                let dx = &mut adj[input.0];
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i];
                }
            }
        }
    }

    pub fn op_name(&self, id: ValueId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}

/// Three disjoint mutable adjoint buffers (conv/linear input, weight, bias —
/// always distinct nodes).
fn three_mut<T>(v: &mut [Vec<T>], a: usize, b: usize, c: usize) -> (&mut Vec<T>, &mut Vec<T>, &mut Vec<T>) {
    assert!(a != b && b != c && a != c);
    let mut idx = [(a, 0usize), (b, 1), (c, 2)];
    idx.sort_by_key(|p| p.0);
    let (lo, rest) = v.split_at_mut(idx[1].0);
    let (mid, hi) = rest.split_at_mut(idx[2].0 - idx[1].0);
    let mut slots: [Option<&mut Vec<T>>; 3] = [None, None, None];
    slots[idx[0].1] = Some(&mut lo[idx[0].0]);
    slots[idx[1].1] = Some(&mut mid[0]);
    slots[idx[2].1] = Some(&mut hi[0]);
    let [sa, sb, sc] = slots;
    (sa.unwrap(), sb.unwrap(), sc.unwrap())
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<S: Scalar>(
    x: &[S],
    xshape: &[usize],
    w: &[S],
    wshape: &[usize],
    bias: &[S],
    stride: usize,
    pad: usize,
    out: &mut [S],
    oshape: &[usize],
) {
    let (n, cin, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (cout, _, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    let (ho, wo) = (oshape[2], oshape[3]);
    for b in 0..n {
        for co in 0..cout {
            let obase = ((b * cout + co) * ho) * wo;
            for v in out[obase..obase + ho * wo].iter_mut() {
                *v = bias[co];
            }
            for ci in 0..cin {
                let xbase = (b * cin + ci) * h;
                let wbase = (co * cin + ci) * kh;
                for ky in 0..kh {
                    let wrow = &w[(wbase + ky) * kw..(wbase + ky) * kw + kw];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &x[(xbase + iy as usize) * wd..(xbase + iy as usize) * wd + wd];
                        let orow = &mut out[obase + oy * wo..obase + oy * wo + wo];
                        for kx in 0..kw {
                            let wv = wrow[kx];
                            if wv == S::zero() {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                orow[ox] = orow[ox] + xrow[ix as usize] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<S: Scalar>(
    x: &[S],
    xshape: &[usize],
    w: &[S],
    wshape: &[usize],
    stride: usize,
    pad: usize,
    g: &[S],
    oshape: &[usize],
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    let (n, cin, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (cout, _, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    let (ho, wo) = (oshape[2], oshape[3]);
    for b in 0..n {
        for co in 0..cout {
            let obase = ((b * cout + co) * ho) * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g[obase + oy * wo + ox];
                    if go == S::zero() {
                        continue;
                    }
                    db[co] = db[co] + go;
                    for ci in 0..cin {
                        let xbase = (b * cin + ci) * h;
                        let wbase = (co * cin + ci) * kh;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = (xbase + iy as usize) * wd;
                            let wrow = (wbase + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                dx[xrow + ix as usize] = dx[xrow + ix as usize] + go * w[wrow + kx];
                                dw[wrow + kx] = dw[wrow + kx] + go * x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf64(g: &mut Graph<f64>, shape: Vec<usize>, values: Vec<f64>) -> ValueId {
        let t = Tensor::new(shape, values).unwrap();
        g.leaf_grad(&t)
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![1, 1, 4, 4], (0..16).map(|v| v as f64 * 0.5 - 3.0).collect());
        // 3x3 kernel with 1 at the center.
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = leaf64(&mut g, vec![1, 1, 3, 3], k);
        let b = leaf64(&mut g, vec![1], vec![0.0]);
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![1, 2], vec![3.0, 4.0]);
        let y = g.l2_normalize_rows(x).unwrap();
        let v = g.values(y);
        assert!((v[0] - 0.6).abs() < 1e-12);
        assert!((v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2, 3], vec![-1.0, -0.5, -2.0, -0.1, -7.0, -3.3]);
        let y = g.relu(x);
        assert!(g.values(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![5], vec![1.0, -2.0, 3.0, 0.0, 9.0]);
        let y = g.sum_all(x);
        g.backward_scalar(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn l2_normalize_gradient_orthogonal_to_unit_input() {
        // For unit-norm x and seed = x the Jacobian projects to zero.
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![1, 2], vec![0.6, 0.8]);
        let y = g.l2_normalize_rows(x).unwrap();
        let seed = g.values(y).to_vec();
        g.backward(y, &seed).unwrap();
        for &gv in g.grad(x).unwrap() {
            assert!(gv.abs() < 1e-12, "grad component {}", gv);
        }
    }

    #[test]
    fn max_breaks_ties_to_lowest_index() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![4], vec![2.0, 7.0, 7.0, 1.0]);
        let y = g.max_all(x).unwrap();
        g.backward_scalar(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn min_breaks_ties_to_lowest_index() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![4], vec![3.0, -1.0, -1.0, 5.0]);
        let y = g.min_all(x).unwrap();
        g.backward_scalar(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_after_leaf_mutation_requires_recompute() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2], vec![1.0, 2.0]);
        let y = g.sum_all(x);
        g.set_leaf(x, &[3.0, 4.0]).unwrap();
        assert!(matches!(g.backward_scalar(y), Err(Error::BackwardBeforeForward)));
        g.recompute();
        assert_eq!(g.values(y), &[7.0]);
        g.backward_scalar(y).unwrap();
    }

    #[test]
    fn shape_mismatch_names_the_operation() {
        let mut g = Graph::<f64>::new();
        let a = leaf64(&mut g, vec![2], vec![1.0, 2.0]);
        let b = leaf64(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        let err = g.add(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { op, .. } => assert_eq!(op, "add"),
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn determinism_identical_graphs_bitwise() {
        let build = || {
            let mut g = Graph::<f32>::new();
            let x = g
                .constant(vec![2, 3], vec![0.1, -0.7, 0.33, 1.5, -2.25, 0.5])
                .unwrap();
            let y = g.l2_normalize_rows(x).unwrap();
            let z = g.mul(y, y).unwrap();
            let s = g.sum_all(z);
            g.values(s)[0].to_bits()
        };
        assert_eq!(build(), build());
    }
}
