//! Tape-based reverse-mode autodiff over dense tensors.
//!
//! Operations evaluate eagerly and are recorded on a tape; [`Graph::backward`]
//! replays the tape in reverse to accumulate gradients for every registered
//! parameter. The operator set is intentionally small: exactly what the
//! attention branches, losses, and the tiny backbone need.
//!
//! A graph is single-owner during forward/backward. Distinct graphs may run
//! on distinct threads; they share nothing mutable.

mod backward;
mod check;
mod ops;

pub use check::{GradCheckEntry, GradCheckReport, grad_check};

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::dct::DctPlan;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Error, Debug)]
pub enum EngineError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("backward already ran on this graph; reset it or build a new one")]
    BackwardTwice,
    #[error("parameter '{0}' is already registered")]
    DuplicateParameter(String),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("non-finite values detected at stage '{0}'")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ReduceKind {
    Sum,
    Mean,
    Max,
    Var,
    L2,
}

#[derive(Clone, Debug)]
pub(crate) enum LeafKind {
    Constant,
    Input,
    Param { name: String },
}

pub(crate) enum Op<T: Scalar> {
    Leaf(LeafKind),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Batched matrix product with optional transposes on the last two axes.
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    /// Per-pixel channel mixing: `[B,T,C,H,W] x [O,C] -> [B,T,O,H,W]`.
    ChannelMix { x: NodeId, w: NodeId },
    /// Zero-padded strided 3D convolution over (T, H, W).
    Conv3d { x: NodeId, w: NodeId, bias: Option<NodeId>, stride: [usize; 3], pad: [usize; 3] },
    /// Reduction over a sorted axis set; reduced axes are removed.
    Reduce { x: NodeId, axes: Vec<usize>, kind: ReduceKind, argmax: Vec<usize> },
    Unary { x: NodeId, kind: UnaryKind },
    Softmax { x: NodeId, axis: usize },
    /// `y = mul * x + add`; the offset is folded into the value at record time.
    AffineConst { x: NodeId, mul: T },
    /// Maps the input's axes onto a larger target shape; new axes replicate.
    Expand { x: NodeId, axes_map: Vec<usize> },
    Reshape { x: NodeId },
    Permute { x: NodeId, perm: Vec<usize> },
    Slice { x: NodeId, axis: usize, start: usize },
    Concat { xs: Vec<NodeId>, axis: usize },
    /// Framewise orthonormal 2D DCT-II (or its transpose when `inverse`).
    DctFrames { x: NodeId, plan: Arc<DctPlan<T>>, inverse: bool },
}

pub(crate) struct Node<T: Scalar> {
    pub op: Op<T>,
    pub value: Tensor<T>,
    pub needs_grad: bool,
}

/// The tape. Build it by calling operator methods; values are available
/// immediately, gradients after [`Graph::backward`].
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` output w.r.t. this node, if any
    /// flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Clears gradient state so the same graph may run backward again.
    pub fn reset_backward(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- leaves ----------------------------------------------------------

    /// A constant leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf(LeafKind::Constant), value, false)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// An input leaf. With `requires_grad`, its gradient is retrievable via
    /// [`Graph::grad`] after backward.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf(LeafKind::Input), value, requires_grad)
    }

    /// Pulls a registered parameter's current value onto the tape.
    /// `backward` accumulates its gradient under the same name.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        let p = store.get(name).ok_or_else(|| EngineError::UnknownParameter(name.to_string()))?;
        Ok(self.push(
            Op::Leaf(LeafKind::Param { name: name.to_string() }),
            p.value.clone(),
            true,
        ))
    }

    // ---- elementwise binary ----------------------------------------------

    fn binary(&mut self, op_name: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(EngineError::ShapeMismatch {
                op: op_name,
                details: format!("lhs {:?} vs rhs {:?}", sa, sb),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b)?;
        let v = ops::ew(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b)?;
        let v = ops::ew(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b)?;
        let v = ops::ew(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b)?;
        let v = ops::ew(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Div(a, b), v, ng))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product. `a` is `[.., M, K]`, `b` is `[.., K, N]` with
    /// matching leading dims, or rank-2 `[K, N]` shared across the batch.
    /// `ta`/`tb` transpose the trailing two axes of the respective operand.
    pub fn matmul_full(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let v = ops::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, ta, tb)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, v, ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_full(a, b, false, false)
    }

    /// `a @ b^T`, the similarity-matrix shape.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_full(a, b, false, true)
    }

    /// Learnable 1x1 mixing across the channel axis of a video tensor.
    pub fn channel_mix(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let v = ops::channel_mix(&self.nodes[x.0].value, &self.nodes[w.0].value)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::ChannelMix { x, w }, v, ng))
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<NodeId> {
        let v = ops::conv3d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            stride,
            pad,
        )?;
        let mut ng = self.needs(x) || self.needs(w);
        if let Some(b) = bias {
            ng |= self.needs(b);
        }
        Ok(self.push(Op::Conv3d { x, w, bias, stride, pad }, v, ng))
    }

    // ---- reductions --------------------------------------------------------

    fn reduce(&mut self, kind: ReduceKind, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let axes = ops::check_axes("reduce", axes, self.shape(x).len())?;
        let (v, argmax) = ops::reduce(&self.nodes[x.0].value, &axes, kind);
        let ng = self.needs(x);
        Ok(self.push(Op::Reduce { x, axes, kind, argmax }, v, ng))
    }

    /// Sum over the given axes; reduced axes are removed from the shape.
    pub fn sum(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce(ReduceKind::Sum, x, axes)
    }

    pub fn mean(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce(ReduceKind::Mean, x, axes)
    }

    /// Max pooling over the given axes; gradient routes to the first argmax.
    pub fn max_reduce(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce(ReduceKind::Max, x, axes)
    }

    /// Biased (1/N) variance over the given axes.
    pub fn variance(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce(ReduceKind::Var, x, axes)
    }

    /// L2 norm (sqrt of sum of squares) over the given axes. Gradient at an
    /// exactly-zero norm is defined as zero.
    pub fn l2_norm(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce(ReduceKind::L2, x, axes)
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, kind: UnaryKind, x: NodeId) -> NodeId {
        let v = ops::unary(&self.nodes[x.0].value, &kind);
        // sign is piecewise constant: nothing flows through it.
        let ng = self.needs(x) && kind != UnaryKind::Sign;
        self.push(Op::Unary { x, kind }, v, ng)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Log, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// Element-wise sign with sign(0) = 0. Gradient contribution is exactly
    /// zero (straight-zero convention).
    pub fn sign(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Sign, x)
    }

    /// `|x|` as `sign(x) * x`, inheriting the straight-zero subgradient at 0.
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.sign(x);
        self.mul(s, x)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.mul(x, x)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(EngineError::InvalidAxis { op: "softmax", axis, rank });
        }
        let v = ops::softmax(&self.nodes[x.0].value, axis);
        let ng = self.needs(x);
        Ok(self.push(Op::Softmax { x, axis }, v, ng))
    }

    /// `mul * x + add` with host-side constants.
    pub fn affine_const(&mut self, x: NodeId, mul: T, add: T) -> NodeId {
        let v = self.nodes[x.0].value.map(|e| mul * e + add);
        let ng = self.needs(x);
        self.push(Op::AffineConst { x, mul }, v, ng)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        self.affine_const(x, c, T::ZERO)
    }

    pub fn add_const(&mut self, x: NodeId, c: T) -> NodeId {
        self.affine_const(x, T::ONE, c)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine_const(x, -T::ONE, T::ZERO)
    }

    // ---- shape manipulation --------------------------------------------------

    /// Broadcast: `axes_map[i]` names the target axis the i-th input axis maps
    /// to (strictly increasing). Axes of `target_shape` not named are filled by
    /// replication. A rank-0 input with an empty map broadcasts everywhere.
    pub fn expand(
        &mut self,
        x: NodeId,
        target_shape: &[usize],
        axes_map: &[usize],
    ) -> Result<NodeId> {
        ops::check_expand(self.shape(x), target_shape, axes_map)?;
        let v = ops::expand(&self.nodes[x.0].value, target_shape, axes_map);
        let ng = self.needs(x);
        Ok(self.push(Op::Expand { x, axes_map: axes_map.to_vec() }, v, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.numel() {
            return Err(EngineError::ShapeMismatch {
                op: "reshape",
                details: format!("cannot view {:?} as {:?}", self.shape(x), shape),
            });
        }
        let v = self.nodes[x.0].value.reshaped(shape);
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape { x }, v, ng))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = ops::permute(&self.nodes[x.0].value, perm)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Permute { x, perm: perm.to_vec() }, v, ng))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice(&self.nodes[x.0].value, axis, start, len)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Slice { x, axis, start }, v, ng))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = xs.iter().map(|id| &self.nodes[id.0].value).collect();
        let v = ops::concat(&tensors, axis)?;
        let ng = xs.iter().any(|id| self.needs(*id));
        Ok(self.push(Op::Concat { xs: xs.to_vec(), axis }, v, ng))
    }

    // ---- spectral -------------------------------------------------------------

    /// Orthonormal 2D DCT-II applied independently per `(b, t, c)` frame.
    pub fn dct_frames(&mut self, x: NodeId, plan: &Arc<DctPlan<T>>) -> Result<NodeId> {
        let v = ops::dct_frames(&self.nodes[x.0].value, plan, false)?;
        let ng = self.needs(x);
        Ok(self.push(Op::DctFrames { x, plan: Arc::clone(plan), inverse: false }, v, ng))
    }

    /// Transpose-basis (inverse) transform; recovers `dct_frames` input.
    pub fn idct_frames(&mut self, x: NodeId, plan: &Arc<DctPlan<T>>) -> Result<NodeId> {
        let v = ops::dct_frames(&self.nodes[x.0].value, plan, true)?;
        let ng = self.needs(x);
        Ok(self.push(Op::DctFrames { x, plan: Arc::clone(plan), inverse: true }, v, ng))
    }

    // ---- driver -----------------------------------------------------------------

    /// Reverse pass from a scalar output. Returns the gradient of `out`
    /// w.r.t. every parameter leaf on the tape, keyed by parameter name;
    /// parameters registered in the store but unused on this tape are absent.
    pub fn backward(&mut self, out: NodeId) -> Result<BTreeMap<String, Tensor<T>>> {
        if self.backward_done {
            return Err(EngineError::BackwardTwice);
        }
        if self.nodes[out.0].value.numel() != 1 {
            return Err(EngineError::NonScalarBackward(self.shape(out).to_vec()));
        }
        self.backward_done = true;
        backward::run(self, out)
    }
}
