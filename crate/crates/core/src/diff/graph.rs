//! Dynamic computation graph with eager forward evaluation and reverse-mode
//! gradient accumulation.

use std::borrow::Cow;

use crate::array::{matmul_nt_into, matmul_tn_into, NdArray};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node inside one [`DiffGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives. Binary elementwise ops broadcast trailing-aligned
/// extents of size one.
#[derive(Debug, Clone, PartialEq)]
pub enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    /// Per-channel cross-correlation of `x: C×T` with `kernel: C×r`, stride 1,
    /// zero padding on both sides.
    DepthwiseConv1d { padding: usize },
    Transpose,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    SoftmaxLastDim,
    LogSoftmaxLastDim,
    LeakyRelu(T),
    Gelu,
    Relu,
    Exp,
    Log,
    Abs,
    Sqrt,
    /// Mean over everything (`None`, scalar result) or one axis kept as size 1.
    Mean(Option<usize>),
    Sum(Option<usize>),
    FrobeniusNormSq,
    ScalarScale(T),
    /// `a (m) ⊗ b (n) → m×n`.
    OuterProduct,
    /// Rows of `x: n×p` against rows of `y: m×p`, giving squared distances `n×m`.
    PairwiseSqDist,
}

impl<T> Op<T> {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul-elementwise",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::DepthwiseConv1d { .. } => "depthwise-conv1d",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SoftmaxLastDim => "softmax-lastdim",
            Op::LogSoftmaxLastDim => "log-softmax-lastdim",
            Op::LeakyRelu(_) => "leaky-relu",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::FrobeniusNormSq => "frobenius-norm-squared",
            Op::ScalarScale(_) => "scalar-scale",
            Op::OuterProduct => "outer-product",
            Op::PairwiseSqDist => "pairwise-sqdist",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::DepthwiseConv1d { .. } => 2,
            Op::OuterProduct | Op::PairwiseSqDist => 2,
            Op::Concat { .. } => usize::MAX,
            _ => 1,
        }
    }
}

/// Negative slope used by graph attention.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct DiffNode<T> {
    pub value: NdArray<T>,
    grad: Option<NdArray<T>>,
    pub op: Op<T>,
    pub parents: Vec<NodeId>,
    pub requires_grad: bool,
}

impl<T: Real> DiffNode<T> {
    /// Accumulated gradient; zeros until a backward pass reaches this node.
    pub fn gradient(&self) -> NdArray<T> {
        self.grad.clone().unwrap_or_else(|| NdArray::zeros(self.value.shape().to_vec()))
    }
}

/// Nodes in creation order, which is a topological order by construction.
#[derive(Debug, Clone)]
pub struct DiffGraph<T> {
    nodes: Vec<DiffNode<T>>,
    seed: u64,
}

impl<T: Real> Default for DiffGraph<T> {
    fn default() -> Self {
        Self::new(0)
    }
}

impl<T: Real> DiffGraph<T> {
    pub fn new(seed: u64) -> Self {
        Self { nodes: Vec::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &DiffNode<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &NdArray<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> NdArray<T> {
        self.nodes[id.0].gradient()
    }

    pub(crate) fn grad_ref(&self, id: NodeId) -> Option<&NdArray<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: NdArray<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: NdArray<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// A copy of `id`'s value that blocks gradient flow.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, parents: Vec<NodeId>, requires_grad: bool) -> NodeId {
        self.nodes.push(DiffNode { value, grad: None, op, parents, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Applies primitive `op` to `inputs`, evaluating it eagerly.
    pub fn apply(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = op.arity();
        if arity != usize::MAX && inputs.len() != arity {
            return Err(Error::shape(format!("{} takes {arity} inputs, got {}", op.tag(), inputs.len())));
        }
        if matches!(op, Op::Leaf) {
            return Err(Error::shape("leaf nodes are created with `leaf`"));
        }
        if inputs.is_empty() {
            return Err(Error::shape(format!("{} needs at least one input", op.tag())));
        }
        let vals: Vec<&NdArray<T>> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let value = forward(&op, &vals)?;
        if !value.all_finite() {
            return Err(Error::NumericDomain(format!("{} produced a non-finite value", op.tag())));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, inputs.to_vec(), requires_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn conv1d_depthwise(&mut self, x: NodeId, kernel: NodeId, padding: usize) -> Result<NodeId> {
        self.apply(Op::DepthwiseConv1d { padding }, &[x, kernel])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        self.apply(Op::Reshape(shape.into()), &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SoftmaxLastDim, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSoftmaxLastDim, &[a])
    }
    pub fn leaky_relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LeakyRelu(T::lit(LEAKY_SLOPE)), &[a])
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Gelu, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sqrt, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean(None), &[a])
    }
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::Mean(Some(axis)), &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum(None), &[a])
    }
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::Sum(Some(axis)), &[a])
    }
    pub fn frobenius_sq(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::FrobeniusNormSq, &[a])
    }
    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.apply(Op::ScalarScale(s), &[a])
    }
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::OuterProduct, &[a, b])
    }
    pub fn pairwise_sqdist(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.apply(Op::PairwiseSqDist, &[x, y])
    }

    /// Accumulates `d(loss)/d(node)` into every node that requires gradients.
    pub fn backpropagate(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Seeds live in a scratch buffer so repeated calls accumulate into the
        // persistent gradients additively.
        let mut scratch: Vec<Option<NdArray<T>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(NdArray::full(shape, T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = scratch[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let (Op::Slice { axis, start, end }, [p]) = (&node.op, node.parents.as_slice()) {
                // written straight into the parent's gradient instead of a padded copy
                let parent = &self.nodes[p.0];
                if parent.requires_grad {
                    let (outer, n, inner) = split_axis(parent.value.shape(), *axis);
                    let w = (end - start) * inner;
                    let slot = scratch[p.0].get_or_insert_with(|| NdArray::zeros(parent.value.shape().to_vec()));
                    let dst = slot.data_mut();
                    for o in 0..outer {
                        let d0 = (o * n + start) * inner;
                        for (a, &b) in dst[d0..d0 + w].iter_mut().zip(&g.data()[o * w..(o + 1) * w]) {
                            *a += b;
                        }
                    }
                }
            } else if !node.parents.is_empty() {
                let parent_vals: Vec<&NdArray<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
                let grads = backward(&node.op, &parent_vals, &needs, &node.value, &g)?;
                for (p, pg) in node.parents.iter().zip(grads) {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    accumulate(&mut scratch[p.0], pg);
                }
            }
            accumulate(&mut self.nodes[idx].grad, g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<NdArray<T>>, g: NdArray<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

// ---------------------------------------------------------------------------
// broadcasting

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Maps flat indices of a broadcast result onto an operand.
enum Offsets {
    /// The operand repeats along leading axes.
    Cycle(usize),
    /// The operand repeats along trailing axes.
    Stretch(usize),
    Table(Vec<usize>),
}

impl Offsets {
    #[inline]
    fn at(&self, k: usize) -> usize {
        match self {
            Offsets::Cycle(len) => k % len,
            Offsets::Stretch(inner) => k / inner,
            Offsets::Table(t) => t[k],
        }
    }
}

fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Offsets {
    let total: usize = out.iter().product();
    let len: usize = inp.iter().product::<usize>().max(1);
    let trimmed = &inp[inp.iter().position(|&d| d != 1).unwrap_or(inp.len())..];
    if out.ends_with(trimmed) {
        return Offsets::Cycle(len);
    }
    let lead = inp.len() - inp.iter().rev().position(|&d| d != 1).unwrap_or(inp.len());
    if inp.len() == out.len() && inp[..lead] == out[..lead] {
        return Offsets::Stretch((total / len).max(1));
    }
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        let oi = i + n - inp.len();
        strides[oi] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Offsets::Table(offsets)
}

fn binary<T: Real>(a: &NdArray<T>, b: &NdArray<T>, f: impl Fn(T, T) -> T) -> Result<NdArray<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let oa = broadcast_offsets(&shape, a.shape());
    let ob = broadcast_offsets(&shape, b.shape());
    let total: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = match (&oa, &ob) {
        (_, Offsets::Cycle(len)) if ad.len() == total => {
            ad.chunks(*len).flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y))).collect()
        }
        (Offsets::Cycle(len), _) if bd.len() == total => {
            bd.chunks(*len).flat_map(|row| ad.iter().zip(row).map(|(&x, &y)| f(x, y))).collect()
        }
        (_, Offsets::Stretch(inner)) if ad.len() == total => {
            ad.chunks(*inner).zip(bd).flat_map(|(row, &y)| row.iter().map(move |&x| (x, y))).map(|(x, y)| f(x, y)).collect()
        }
        _ => (0..total).map(|k| f(ad[oa.at(k)], bd[ob.at(k)])).collect(),
    };
    NdArray::new(shape, data)
}

/// Sums a gradient of the broadcast shape back down to `shape`.
fn reduce_to<T: Real>(g: Cow<'_, NdArray<T>>, shape: &[usize]) -> NdArray<T> {
    if g.shape() == shape {
        return g.into_owned();
    }
    let offs = broadcast_offsets(g.shape(), shape);
    let mut out = NdArray::zeros(shape.to_vec());
    let od = out.data_mut();
    if let Offsets::Cycle(len) = offs {
        for row in g.data().chunks(len) {
            for (o, &v) in od.iter_mut().zip(row) {
                *o += v;
            }
        }
    } else if let Offsets::Stretch(inner) = offs {
        for (o, row) in od.iter_mut().zip(g.data().chunks(inner)) {
            *o = row.iter().fold(*o, |acc, &v| acc + v);
        }
    } else {
        for (k, &v) in g.data().iter().enumerate() {
            od[offs.at(k)] += v;
        }
    }
    out
}

fn expand<'a, T: Real>(v: &'a NdArray<T>, shape: &[usize]) -> Cow<'a, NdArray<T>> {
    if v.shape() == shape {
        return Cow::Borrowed(v);
    }
    let offs = broadcast_offsets(shape, v.shape());
    let total: usize = shape.iter().product();
    let data = match offs {
        Offsets::Cycle(_) => v.data().iter().copied().cycle().take(total).collect(),
        Offsets::Stretch(inner) => v.data().iter().flat_map(|&x| std::iter::repeat_n(x, inner)).collect(),
        _ => (0..total).map(|k| v.data()[offs.at(k)]).collect(),
    };
    Cow::Owned(NdArray::new(shape.to_vec(), data).expect("broadcast shape"))
}

// ---------------------------------------------------------------------------
// axis helpers

/// (outer, axis extent, inner) sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_axis<T: Real>(a: &NdArray<T>, axis: usize, mean: bool) -> Result<NdArray<T>> {
    if axis >= a.ndim() {
        return Err(Error::shape(format!("axis {axis} out of range for {:?}", a.shape())));
    }
    let (outer, n, inner) = split_axis(a.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            for i in 0..inner {
                out[o * inner + i] += a.data()[base + i];
            }
        }
    }
    if mean {
        let s = T::one() / T::count(n.max(1));
        out.iter_mut().for_each(|v| *v *= s);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = 1;
    NdArray::new(shape, out)
}

/// `(1 + tanh(u)) / 2` written as the logistic of `2u`, which costs one `exp`.
fn gelu_gate<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    (T::one() / (T::one() + (-(u + u)).exp()), du)
}

fn gelu<T: Real>(x: T) -> T {
    x * gelu_gate(x).0
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (s, du) = gelu_gate(x);
    s + T::lit(2.0) * x * s * (T::one() - s) * du
}

/// GELU, tanh form. Exposed so oracles and tests share the scalar definition.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    gelu(x)
}

fn softmax_rows<T: Real>(a: &NdArray<T>, log: bool) -> Result<NdArray<T>> {
    let n = *a.shape().last().ok_or_else(|| Error::shape("softmax of a scalar"))?;
    if n == 0 {
        return Err(Error::shape("softmax over an empty axis"));
    }
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if log {
            let lz = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - m - lz);
        } else {
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let z: T = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v = *v / z);
        }
    }
    NdArray::new(a.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// forward

fn forward<T: Real>(op: &Op<T>, v: &[&NdArray<T>]) -> Result<NdArray<T>> {
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add => binary(v[0], v[1], |a, b| a + b),
        Op::Sub => binary(v[0], v[1], |a, b| a - b),
        Op::Mul => binary(v[0], v[1], |a, b| a * b),
        Op::Div => {
            if v[1].data().iter().any(|&d| d == T::zero()) {
                return Err(Error::NumericDomain("division by zero".into()));
            }
            binary(v[0], v[1], |a, b| a / b)
        }
        Op::MatMul => v[0].matmul(v[1]),
        Op::DepthwiseConv1d { padding } => conv1d_forward(v[0], v[1], *padding),
        Op::Transpose => v[0].transpose(),
        Op::Reshape(shape) => v[0].clone().reshape(shape.clone()),
        Op::Concat { axis } => concat_forward(v, *axis),
        Op::Slice { axis, start, end } => slice_forward(v[0], *axis, *start, *end),
        Op::SoftmaxLastDim => softmax_rows(v[0], false),
        Op::LogSoftmaxLastDim => softmax_rows(v[0], true),
        Op::LeakyRelu(s) => Ok(v[0].map(|x| if x < T::zero() { *s * x } else { x })),
        Op::Gelu => Ok(v[0].map(gelu)),
        Op::Relu => Ok(v[0].map(|x| x.max(T::zero()))),
        Op::Exp => Ok(v[0].map(T::exp)),
        Op::Log => {
            if let Some(&bad) = v[0].data().iter().find(|&&x| x <= T::zero()) {
                return Err(Error::NumericDomain(format!("log of non-positive value {bad}")));
            }
            Ok(v[0].map(T::ln))
        }
        Op::Abs => Ok(v[0].map(T::abs)),
        Op::Sqrt => {
            if let Some(&bad) = v[0].data().iter().find(|&&x| x < T::zero()) {
                return Err(Error::NumericDomain(format!("sqrt of negative value {bad}")));
            }
            Ok(v[0].map(T::sqrt))
        }
        Op::Mean(None) => Ok(NdArray::scalar(v[0].mean())),
        Op::Sum(None) => Ok(NdArray::scalar(v[0].sum())),
        Op::Mean(Some(axis)) => reduce_axis(v[0], *axis, true),
        Op::Sum(Some(axis)) => reduce_axis(v[0], *axis, false),
        Op::FrobeniusNormSq => Ok(NdArray::scalar(v[0].frobenius_sq())),
        Op::ScalarScale(s) => Ok(v[0].scale(*s)),
        Op::OuterProduct => {
            let (a, b) = (v[0], v[1]);
            if a.ndim() != 1 || b.ndim() != 1 {
                return Err(Error::shape("outer product takes two vectors"));
            }
            let data = a.data().iter().flat_map(|&x| b.data().iter().map(move |&y| x * y)).collect();
            NdArray::new([a.len(), b.len()], data)
        }
        Op::PairwiseSqDist => {
            let (x, y) = (v[0], v[1]);
            if x.ndim() != 2 || y.ndim() != 2 || x.cols() != y.cols() {
                return Err(Error::shape(format!("pairwise-sqdist {:?} vs {:?}", x.shape(), y.shape())));
            }
            let (n, m) = (x.rows(), y.rows());
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                for j in 0..m {
                    out.push(x.row(i).iter().zip(y.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum());
                }
            }
            NdArray::new([n, m], out)
        }
    }
}

/// Output length of a stride-1 convolution; `None` if the kernel does not fit.
pub fn conv_out_len(len: usize, taps: usize, padding: usize) -> Option<usize> {
    (len + 2 * padding + 1).checked_sub(taps).filter(|&n| n > 0)
}

fn conv1d_forward<T: Real>(x: &NdArray<T>, w: &NdArray<T>, pad: usize) -> Result<NdArray<T>> {
    if x.ndim() != 2 || w.ndim() != 2 || x.rows() != w.rows() {
        return Err(Error::shape(format!("depthwise conv {:?} with kernel {:?}", x.shape(), w.shape())));
    }
    let (c, len) = (x.rows(), x.cols());
    let taps = w.cols();
    let out_len = conv_out_len(len, taps, pad).ok_or_else(|| Error::shape("kernel longer than padded input"))?;
    let mut out = vec![T::zero(); c * out_len];
    for ch in 0..c {
        let xr = x.row(ch);
        let wr = w.row(ch);
        for t in 0..out_len {
            let mut acc = T::zero();
            for (j, &wv) in wr.iter().enumerate() {
                let src = t + j;
                if src >= pad && src - pad < len {
                    acc += wv * xr[src - pad];
                }
            }
            out[ch * out_len + t] = acc;
        }
    }
    NdArray::new([c, out_len], out)
}

fn concat_forward<T: Real>(parts: &[&NdArray<T>], axis: usize) -> Result<NdArray<T>> {
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(Error::shape(format!("concat axis {axis} out of range for {first:?}")));
    }
    for p in parts {
        let s = p.shape();
        if s.len() != first.len() || s.iter().zip(first).enumerate().any(|(d, (a, b))| d != axis && a != b) {
            return Err(Error::shape(format!("concat {first:?} with {s:?}")));
        }
    }
    let (outer, _, inner) = split_axis(first, axis);
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * n..(o + 1) * n]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total_axis;
    NdArray::new(shape, data)
}

fn slice_forward<T: Real>(a: &NdArray<T>, axis: usize, start: usize, end: usize) -> Result<NdArray<T>> {
    if axis >= a.ndim() || start >= end || end > a.shape()[axis] {
        return Err(Error::shape(format!("slice {start}..{end} on axis {axis} of {:?}", a.shape())));
    }
    let (outer, n, inner) = split_axis(a.shape(), axis);
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        data.extend_from_slice(&a.data()[(o * n + start) * inner..(o * n + end) * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = end - start;
    NdArray::new(shape, data)
}

// ---------------------------------------------------------------------------
// backward

/// Gradients for every parent; entries whose `needs` flag is false may be
/// left empty.
/// Gradients for parents that do not need one are left as empty placeholders.
fn skip_unless<T: Real>(need: bool, f: impl FnOnce() -> NdArray<T>) -> NdArray<T> {
    if need {
        f()
    } else {
        NdArray::zeros([0])
    }
}

fn backward<T: Real>(op: &Op<T>, v: &[&NdArray<T>], needs: &[bool], out: &NdArray<T>, g: &NdArray<T>) -> Result<Vec<NdArray<T>>> {
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add => vec![
            skip_unless(needs[0], || reduce_to(Cow::Borrowed(g), v[0].shape())),
            skip_unless(needs[1], || reduce_to(Cow::Borrowed(g), v[1].shape())),
        ],
        Op::Sub => vec![
            skip_unless(needs[0], || reduce_to(Cow::Borrowed(g), v[0].shape())),
            skip_unless(needs[1], || reduce_to(Cow::Owned(g.scale(-T::one())), v[1].shape())),
        ],
        Op::Mul => {
            let a = expand(v[0], g.shape());
            let b = expand(v[1], g.shape());
            let ga = if needs[0] { reduce_to(Cow::Owned(g.zip_map(&b, |g, b| g * b)?), v[0].shape()) } else { NdArray::zeros([0]) };
            let gb = if needs[1] { reduce_to(Cow::Owned(g.zip_map(&a, |g, a| g * a)?), v[1].shape()) } else { NdArray::zeros([0]) };
            vec![ga, gb]
        }
        Op::Div => {
            let a = expand(v[0], g.shape());
            let b = expand(v[1], g.shape());
            let ga = if needs[0] { reduce_to(Cow::Owned(g.zip_map(&b, |g, b| g / b)?), v[0].shape()) } else { NdArray::zeros([0]) };
            let gb = if needs[1] {
                let d: Vec<T> = g.data().iter().zip(a.data()).zip(b.data()).map(|((&g, &a), &b)| -g * a / (b * b)).collect();
                reduce_to(Cow::Owned(NdArray::new(g.shape().to_vec(), d)?), v[1].shape())
            } else {
                NdArray::zeros([0])
            };
            vec![ga, gb]
        }
        Op::MatMul => {
            let (a, b) = (v[0], v[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            // gA = G · Bᵀ, gB = Aᵀ · G
            let mut ga = NdArray::zeros([0]);
            if needs[0] {
                let mut d = vec![T::zero(); m * k];
                matmul_nt_into(g.data(), b.data(), &mut d, m, n, k);
                ga = NdArray::new([m, k], d)?;
            }
            let mut gb = NdArray::zeros([0]);
            if needs[1] {
                let mut d = vec![T::zero(); k * n];
                matmul_tn_into(a.data(), g.data(), &mut d, m, k, n);
                gb = NdArray::new([k, n], d)?;
            }
            vec![ga, gb]
        }
        Op::DepthwiseConv1d { padding } => {
            let (x, w) = (v[0], v[1]);
            let (c, len, taps, out_len) = (x.rows(), x.cols(), w.cols(), g.cols());
            let pad = *padding;
            let mut gx = NdArray::zeros([c, len]);
            let mut gw = NdArray::zeros([c, taps]);
            for ch in 0..c {
                for t in 0..out_len {
                    let gv = g.at(ch, t);
                    for j in 0..taps {
                        let src = t + j;
                        if src >= pad && src - pad < len {
                            let xi = src - pad;
                            gx.data_mut()[ch * len + xi] += gv * w.at(ch, j);
                            gw.data_mut()[ch * taps + j] += gv * x.at(ch, xi);
                        }
                    }
                }
            }
            vec![gx, gw]
        }
        Op::Transpose => vec![g.transpose()?],
        Op::Reshape(_) => vec![g.clone().reshape(v[0].shape().to_vec())?],
        Op::Concat { axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut grads = Vec::with_capacity(v.len());
            let mut offset = 0;
            for p in v {
                let n = p.shape()[*axis];
                let mut data = Vec::with_capacity(p.len());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    data.extend_from_slice(&g.data()[base..base + n * inner]);
                }
                grads.push(NdArray::new(p.shape().to_vec(), data)?);
                offset += n;
            }
            grads
        }
        Op::Slice { axis, start, end } => {
            let (outer, n, inner) = split_axis(v[0].shape(), *axis);
            let w = end - start;
            let mut gx = NdArray::zeros(v[0].shape().to_vec());
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * w * inner;
                gx.data_mut()[dst..dst + w * inner].copy_from_slice(&g.data()[src..src + w * inner]);
            }
            vec![gx]
        }
        Op::SoftmaxLastDim => {
            let n = *out.shape().last().unwrap_or(&1);
            let mut gx = Vec::with_capacity(out.len());
            for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                gx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
            }
            vec![NdArray::new(out.shape().to_vec(), gx)?]
        }
        Op::LogSoftmaxLastDim => {
            let n = *out.shape().last().unwrap_or(&1);
            let mut gx = Vec::with_capacity(out.len());
            for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                let gs: T = gr.iter().copied().sum();
                gx.extend(yr.iter().zip(gr).map(|(&y, &g)| g - y.exp() * gs));
            }
            vec![NdArray::new(out.shape().to_vec(), gx)?]
        }
        Op::LeakyRelu(s) => vec![v[0].zip_map(g, |x, g| if x < T::zero() { *s * g } else { g })?],
        Op::Relu => vec![v[0].zip_map(g, |x, g| if x > T::zero() { g } else { T::zero() })?],
        Op::Gelu => vec![v[0].zip_map(g, |x, g| g * gelu_grad(x))?],
        Op::Exp => vec![out.zip_map(g, |y, g| y * g)?],
        Op::Log => vec![v[0].zip_map(g, |x, g| g / x)?],
        Op::Abs => vec![v[0].zip_map(g, |x, g| if x > T::zero() { g } else if x < T::zero() { -g } else { T::zero() })?],
        Op::Sqrt => vec![out.zip_map(g, |y, g| if y > T::zero() { g / (T::lit(2.0) * y) } else { T::zero() })?],
        Op::Mean(None) => {
            let s = g.item() / T::count(v[0].len().max(1));
            vec![NdArray::full(v[0].shape().to_vec(), s)]
        }
        Op::Sum(None) => vec![NdArray::full(v[0].shape().to_vec(), g.item())],
        Op::Mean(Some(axis)) => {
            let n = T::count(v[0].shape()[*axis].max(1));
            vec![expand(&g.scale(T::one() / n), v[0].shape()).into_owned()]
        }
        Op::Sum(Some(_)) => vec![expand(g, v[0].shape()).into_owned()],
        Op::FrobeniusNormSq => {
            let s = g.item() * T::lit(2.0);
            vec![v[0].scale(s)]
        }
        Op::ScalarScale(s) => vec![g.scale(*s)],
        Op::OuterProduct => {
            let (a, b) = (v[0], v[1]);
            let (m, n) = (a.len(), b.len());
            let mut ga = vec![T::zero(); m];
            let mut gb = vec![T::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    let gv = g.data()[i * n + j];
                    ga[i] += gv * b.data()[j];
                    gb[j] += gv * a.data()[i];
                }
            }
            vec![NdArray::vector(ga), NdArray::vector(gb)]
        }
        Op::PairwiseSqDist => {
            let (x, y) = (v[0], v[1]);
            let (n, m, p) = (x.rows(), y.rows(), x.cols());
            let mut gx = NdArray::zeros([n, p]);
            let mut gy = NdArray::zeros([m, p]);
            let two = T::lit(2.0);
            for i in 0..n {
                for j in 0..m {
                    let gv = g.at(i, j);
                    if gv == T::zero() {
                        continue;
                    }
                    for k in 0..p {
                        let d = two * gv * (x.at(i, k) - y.at(j, k));
                        gx.data_mut()[i * p + k] += d;
                        gy.data_mut()[j * p + k] -= d;
                    }
                }
            }
            vec![gx, gy]
        }
    })
}
