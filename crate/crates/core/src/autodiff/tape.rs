use std::fmt;
use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use super::AdError;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// What a node is in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Trainable leaf.
    Parameter,
    /// Data or constant leaf.
    Input,
    /// Result of a recorded operation.
    Derived,
}

/// A user-supplied operation with a first-order rule only.
///
/// Gradients flowing through a custom op are recorded as opaque nodes;
/// differentiating those nodes again fails with [`AdError::UnsupportedOp`]
/// instead of silently contributing zero.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn output_shape(&self, inputs: &[&[usize]]) -> std::result::Result<Vec<usize>, String>;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// Vector-Jacobian product for input `index` on raw values.
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor, index: usize) -> Tensor;
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Abs(NodeId),
    /// Piecewise constant; derivative is zero.
    Sign(NodeId),
    Relu(NodeId),
    /// `1[x > 0]`; derivative is zero (the kink's distributional part is dropped).
    ReluMask(NodeId),
    Tanh(NodeId),
    /// `1 - tanh(x)^2`.
    TanhDeriv(NodeId),
    SumAll(NodeId),
    /// Broadcast a scalar to a shape.
    Fill(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    AddChannelBias(NodeId, NodeId),
    SumToChannels(NodeId),
    BroadcastChannels(NodeId, Vec<usize>),
    BroadcastBatch(NodeId, usize),
    SumBatch(NodeId),
    Conv1d(NodeId, NodeId),
    ConvKernelGrad {
        input: NodeId,
        upstream: NodeId,
        width: usize,
    },
    FlipTranspose(NodeId),
    Local {
        input: NodeId,
        weight: NodeId,
        stride: usize,
    },
    LocalInputGrad {
        weight: NodeId,
        upstream: NodeId,
        len: usize,
        stride: usize,
    },
    LocalWeightGrad {
        input: NodeId,
        upstream: NodeId,
        width: usize,
        stride: usize,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Softmax(NodeId),
    /// `p ⊙ (g − rowsum(g ⊙ p))` for softmax output `p`, evaluated without cancellation.
    SoftmaxGrad {
        probs: NodeId,
        upstream: NodeId,
    },
    LogSoftmax(NodeId),
    RowSumBroadcast(NodeId),
    Gather(NodeId, Arc<[usize]>),
    Scatter(NodeId, Arc<[usize]>, usize),
    Custom(Arc<dyn CustomOp>, Vec<NodeId>),
    CustomGrad {
        op: Arc<dyn CustomOp>,
        inputs: Vec<NodeId>,
        output: NodeId,
        upstream: NodeId,
        index: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Abs(..) => "abs",
            Op::Sign(..) => "sign",
            Op::Relu(..) => "relu",
            Op::ReluMask(..) => "relu_mask",
            Op::Tanh(..) => "tanh",
            Op::TanhDeriv(..) => "tanh_deriv",
            Op::SumAll(..) => "sum_all",
            Op::Fill(..) => "fill",
            Op::Reshape(..) => "reshape",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::SumToChannels(..) => "sum_to_channels",
            Op::BroadcastChannels(..) => "broadcast_channels",
            Op::BroadcastBatch(..) => "broadcast_batch",
            Op::SumBatch(..) => "sum_batch",
            Op::Conv1d(..) => "conv1d",
            Op::ConvKernelGrad { .. } => "conv_kernel_grad",
            Op::FlipTranspose(..) => "flip_transpose",
            Op::Local { .. } => "locally_connected",
            Op::LocalInputGrad { .. } => "local_input_grad",
            Op::LocalWeightGrad { .. } => "local_weight_grad",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxGrad { .. } => "softmax_grad",
            Op::LogSoftmax(..) => "log_softmax",
            Op::RowSumBroadcast(..) => "row_sum_broadcast",
            Op::Gather(..) => "gather",
            Op::Scatter(..) => "scatter",
            Op::Custom(..) => "custom",
            Op::CustomGrad { .. } => "custom_grad",
        }
    }

    pub(crate) fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddChannelBias(a, b) | Op::Conv1d(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Abs(a)
            | Op::Sign(a)
            | Op::Relu(a)
            | Op::ReluMask(a)
            | Op::Tanh(a)
            | Op::TanhDeriv(a)
            | Op::SumAll(a)
            | Op::Fill(a, _)
            | Op::Reshape(a, _)
            | Op::SumToChannels(a)
            | Op::BroadcastChannels(a, _)
            | Op::BroadcastBatch(a, _)
            | Op::SumBatch(a)
            | Op::FlipTranspose(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::RowSumBroadcast(a)
            | Op::Gather(a, _)
            | Op::Scatter(a, _, _) => vec![*a],
            Op::ConvKernelGrad { input, upstream, .. } => vec![*input, *upstream],
            Op::Local { input, weight, .. } => vec![*input, *weight],
            Op::LocalInputGrad { weight, upstream, .. } => vec![*weight, *upstream],
            Op::LocalWeightGrad { input, upstream, .. } => vec![*input, *upstream],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::SoftmaxGrad { probs, upstream } => vec![*probs, *upstream],
            Op::Custom(_, inputs) => inputs.clone(),
            Op::CustomGrad {
                inputs,
                output,
                upstream,
                ..
            } => {
                let mut p = inputs.clone();
                p.push(*output);
                p.push(*upstream);
                p
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    role: Role,
}

/// Define-by-run computation record.
///
/// Every operation is evaluated eagerly and appended. [`Tape::gradient`]
/// appends the backward pass as ordinary nodes, so gradients can be
/// differentiated again. Nodes only ever reference earlier nodes, which keeps
/// the graph acyclic and the node order topological.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

type Result<T> = std::result::Result<T, AdError>;

fn shape_err(node: usize, op: &Op, detail: impl Into<String>) -> AdError {
    AdError::Shape {
        node,
        op: op.name(),
        detail: detail.into(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, Role::Parameter)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, Role::Input)
    }

    fn leaf(&mut self, value: Tensor, role: Role) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            role,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// All node handles in recording order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn role(&self, id: NodeId) -> Role {
        self.nodes[id.0].role
    }

    /// Name of the operation that produced `id` (`"leaf"` for leaves).
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    /// Drops every node created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AdError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        for p in op.parents() {
            self.check(p)?;
        }
        let index = self.nodes.len();
        let value = self.eval(&op, index)?;
        self.nodes.push(Node {
            value,
            op,
            role: Role::Derived,
        });
        Ok(NodeId(index))
    }

    /// Computes the value of `op` from the current values of its parents.
    fn eval(&self, op: &Op, index: usize) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let same = |a: &NodeId, b: &NodeId| -> Result<()> {
            if v(a).shape() == v(b).shape() {
                Ok(())
            } else {
                Err(shape_err(
                    index,
                    op,
                    format!("operands {a} {:?} and {b} {:?} differ", v(a).shape(), v(b).shape()),
                ))
            }
        };
        let rank = |a: &NodeId, r: usize| -> Result<()> {
            if v(a).rank() == r {
                Ok(())
            } else {
                Err(shape_err(
                    index,
                    op,
                    format!("operand {a} has shape {:?}, expected rank {r}", v(a).shape()),
                ))
            }
        };
        let out = match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => {
                same(a, b)?;
                v(a).zip_map(v(b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                same(a, b)?;
                v(a).zip_map(v(b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                same(a, b)?;
                v(a).zip_map(v(b), |x, y| x * y)
            }
            Op::Neg(a) => v(a).map(|x| -x),
            Op::Scale(a, c) => {
                let c = *c;
                v(a).map(|x| c * x)
            }
            Op::Abs(a) => v(a).map(f64::abs),
            Op::Sign(a) => v(a).map(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::ReluMask(a) => v(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::TanhDeriv(a) => v(a).map(|x| {
                let t = x.tanh();
                1.0 - t * t
            }),
            Op::SumAll(a) => Tensor::scalar(v(a).sum()),
            Op::Fill(a, shape) => {
                if v(a).len() != 1 {
                    return Err(shape_err(index, op, "fill source must hold one value"));
                }
                Tensor::full(shape, v(a).item())
            }
            Op::Reshape(a, shape) => v(a).clone().reshaped(shape).ok_or_else(|| {
                shape_err(
                    index,
                    op,
                    format!("cannot view {:?} as {shape:?}", v(a).shape()),
                )
            })?,
            Op::AddChannelBias(x, b) => {
                let xs = v(x).shape();
                if xs.len() < 2 || v(b).shape() != [xs[1]] {
                    return Err(shape_err(
                        index,
                        op,
                        format!("bias {:?} does not match axis 1 of {xs:?}", v(b).shape()),
                    ));
                }
                kernels::add_channel_bias(v(x), v(b))
            }
            Op::SumToChannels(x) => {
                if v(x).rank() < 2 {
                    return Err(shape_err(index, op, "need rank >= 2"));
                }
                kernels::sum_to_channels(v(x))
            }
            Op::BroadcastChannels(b, shape) => {
                if shape.len() < 2 || v(b).shape() != [shape[1]] {
                    return Err(shape_err(
                        index,
                        op,
                        format!("cannot broadcast {:?} along axis 1 of {shape:?}", v(b).shape()),
                    ));
                }
                kernels::broadcast_channels(v(b), shape)
            }
            Op::BroadcastBatch(b, batch) => kernels::broadcast_batch(v(b), *batch),
            Op::SumBatch(x) => {
                if v(x).rank() < 1 {
                    return Err(shape_err(index, op, "need rank >= 1"));
                }
                kernels::sum_batch(v(x))
            }
            Op::Conv1d(x, k) => {
                rank(x, 3)?;
                rank(k, 3)?;
                let (xs, ks) = (v(x).shape(), v(k).shape());
                if ks[1] != xs[1] {
                    return Err(shape_err(
                        index,
                        op,
                        format!("kernel {ks:?} expects {} input channels, input {x} has {xs:?}", ks[1]),
                    ));
                }
                if ks[2] % 2 == 0 {
                    return Err(shape_err(index, op, format!("kernel width {} is not odd", ks[2])));
                }
                kernels::conv1d(v(x), v(k))
            }
            Op::ConvKernelGrad {
                input,
                upstream,
                width,
            } => {
                rank(input, 3)?;
                rank(upstream, 3)?;
                let (xs, gs) = (v(input).shape(), v(upstream).shape());
                if xs[0] != gs[0] || xs[2] != gs[2] || width % 2 == 0 {
                    return Err(shape_err(
                        index,
                        op,
                        format!("input {xs:?} and upstream {gs:?} incompatible for width {width}"),
                    ));
                }
                kernels::conv_kernel_grad(v(input), v(upstream), *width)
            }
            Op::FlipTranspose(k) => {
                rank(k, 3)?;
                kernels::flip_transpose(v(k))
            }
            Op::Local {
                input,
                weight,
                stride,
            } => {
                rank(input, 3)?;
                rank(weight, 4)?;
                let (xs, ws) = (v(input).shape(), v(weight).shape());
                let lout = kernels::local_out_len(xs[2], ws[3], *stride);
                if ws[2] != xs[1] || lout != Some(ws[0]) {
                    return Err(shape_err(
                        index,
                        op,
                        format!("weight {ws:?} does not fit input {xs:?} at stride {stride}"),
                    ));
                }
                kernels::local(v(input), v(weight), *stride)
            }
            Op::LocalInputGrad {
                weight,
                upstream,
                len,
                stride,
            } => {
                rank(weight, 4)?;
                rank(upstream, 3)?;
                let (ws, gs) = (v(weight).shape(), v(upstream).shape());
                let lout = kernels::local_out_len(*len, ws[3], *stride);
                if gs[1] != ws[1] || gs[2] != ws[0] || lout != Some(ws[0]) {
                    return Err(shape_err(
                        index,
                        op,
                        format!("weight {ws:?} and upstream {gs:?} incompatible"),
                    ));
                }
                kernels::local_input_grad(v(weight), v(upstream), *len, *stride)
            }
            Op::LocalWeightGrad {
                input,
                upstream,
                width,
                stride,
            } => {
                rank(input, 3)?;
                rank(upstream, 3)?;
                let (xs, gs) = (v(input).shape(), v(upstream).shape());
                let lout = kernels::local_out_len(xs[2], *width, *stride);
                if xs[0] != gs[0] || lout != Some(gs[2]) {
                    return Err(shape_err(
                        index,
                        op,
                        format!("input {xs:?} and upstream {gs:?} incompatible"),
                    ));
                }
                kernels::local_weight_grad(v(input), v(upstream), *width, *stride)
            }
            Op::MatMul { a, b, ta, tb } => {
                if kernels::matmul_dims(v(a).shape(), v(b).shape(), *ta, *tb).is_none() {
                    return Err(shape_err(
                        index,
                        op,
                        format!(
                            "cannot multiply {:?}{} by {:?}{}",
                            v(a).shape(),
                            if *ta { "ᵀ" } else { "" },
                            v(b).shape(),
                            if *tb { "ᵀ" } else { "" }
                        ),
                    ));
                }
                kernels::matmul(v(a), v(b), *ta, *tb)
            }
            Op::Softmax(a) => {
                rank(a, 2)?;
                kernels::softmax_rows(v(a))
            }
            Op::SoftmaxGrad { probs, upstream } => {
                rank(probs, 2)?;
                same(probs, upstream)?;
                kernels::softmax_grad_rows(v(probs), v(upstream))
            }
            Op::LogSoftmax(a) => {
                rank(a, 2)?;
                kernels::log_softmax_rows(v(a))
            }
            Op::RowSumBroadcast(a) => {
                rank(a, 2)?;
                kernels::row_sum_broadcast(v(a))
            }
            Op::Gather(a, idx) => {
                rank(a, 2)?;
                let s = v(a).shape();
                if s[0] != idx.len() || idx.iter().any(|&j| j >= s[1]) {
                    return Err(shape_err(index, op, format!("indices do not fit {s:?}")));
                }
                kernels::gather_rows(v(a), idx)
            }
            Op::Scatter(g, idx, cols) => {
                if v(g).shape() != [idx.len()] || idx.iter().any(|j| j >= cols) {
                    return Err(shape_err(index, op, "indices do not fit"));
                }
                kernels::scatter_rows(v(g), idx, *cols)
            }
            Op::Custom(custom, inputs) => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|i| v(i).shape()).collect();
                let expect = custom
                    .output_shape(&shapes)
                    .map_err(|e| shape_err(index, op, format!("{}: {e}", custom.name())))?;
                let vals: Vec<&Tensor> = inputs.iter().map(v).collect();
                let out = custom.forward(&vals);
                if out.shape() != expect.as_slice() {
                    return Err(shape_err(index, op, format!("{} returned wrong shape", custom.name())));
                }
                out
            }
            Op::CustomGrad {
                op: custom,
                inputs,
                output,
                upstream,
                index: which,
            } => {
                if v(upstream).shape() != v(output).shape() {
                    return Err(shape_err(index, op, "upstream does not match custom output"));
                }
                let vals: Vec<&Tensor> = inputs.iter().map(v).collect();
                custom.vjp(&vals, v(output), v(upstream), *which)
            }
        };
        Ok(out)
    }

    /// Rebinds leaves and recomputes every derived node in recording order.
    ///
    /// Replaying with the leaves a tape was built from reproduces every value
    /// bit for bit.
    pub fn forward(&mut self, bindings: &[(NodeId, Tensor)]) -> Result<()> {
        for (id, value) in bindings {
            self.check(*id)?;
            let node = &self.nodes[id.0];
            if !matches!(node.op, Op::Leaf) {
                return Err(AdError::NotALeaf(id.0));
            }
            if node.value.shape() != value.shape() {
                return Err(AdError::BindingShape {
                    node: id.0,
                    expected: node.value.shape().to_vec(),
                    got: value.shape().to_vec(),
                });
            }
        }
        for (id, value) in bindings {
            self.nodes[id.0].value = value.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.eval(&op, i)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    // ---- operation builders -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }

    pub fn sign(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sign(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn relu_mask(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ReluMask(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(a))
    }

    pub fn fill(&mut self, scalar: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Fill(scalar, shape.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Adds a per-channel bias `b[c]` along axis 1.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddChannelBias(x, bias))
    }

    pub fn sum_to_channels(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SumToChannels(x))
    }

    pub fn broadcast_channels(&mut self, b: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::BroadcastChannels(b, shape.to_vec()))
    }

    /// Repeats `b` along a new leading axis of length `batch`.
    pub fn broadcast_batch(&mut self, b: NodeId, batch: usize) -> Result<NodeId> {
        self.push(Op::BroadcastBatch(b, batch))
    }

    pub fn sum_batch(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SumBatch(x))
    }

    /// Zero-padded "same" convolution, input `[B, in, L]`, kernel `[out, in, W]`.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.push(Op::Conv1d(x, kernel))
    }

    pub fn conv_kernel_grad(&mut self, x: NodeId, upstream: NodeId, width: usize) -> Result<NodeId> {
        self.push(Op::ConvKernelGrad {
            input: x,
            upstream,
            width,
        })
    }

    pub fn flip_transpose(&mut self, kernel: NodeId) -> Result<NodeId> {
        self.push(Op::FlipTranspose(kernel))
    }

    /// Unshared-weight windowed layer, input `[B, in, L]`, weight `[P, out, in, W]`.
    pub fn locally_connected(&mut self, x: NodeId, weight: NodeId, stride: usize) -> Result<NodeId> {
        self.push(Op::Local {
            input: x,
            weight,
            stride,
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax(a))
    }

    pub fn row_sum_broadcast(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::RowSumBroadcast(a))
    }

    /// Picks `a[r, idx[r]]` from each row of a `[R, C]` node.
    pub fn gather(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.push(Op::Gather(a, idx.into()))
    }

    pub fn scatter(&mut self, g: NodeId, idx: &[usize], cols: usize) -> Result<NodeId> {
        self.push(Op::Scatter(g, idx.into(), cols))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Custom(op, inputs.to_vec()))
    }

    // ---- reverse mode -------------------------------------------------------

    /// Reverse-mode gradient of the scalar `target` with respect to `wrt`.
    ///
    /// The backward pass is recorded on this tape, so the returned nodes are
    /// regular nodes that can be differentiated again. A leaf that does not
    /// influence `target` receives a zero gradient.
    pub fn gradient(&mut self, target: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(target)?;
        for w in wrt {
            self.check(*w)?;
        }
        if !self.value(target).shape().is_empty() {
            return Err(AdError::NonScalarTarget {
                node: target.0,
                shape: self.value(target).shape().to_vec(),
            });
        }
        let end = target.0 + 1;
        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if !needs[i] && self.nodes[i].op.parents().iter().any(|p| needs[p.0]) {
                needs[i] = true;
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; end];
        if needs[target.0] {
            grads[target.0] = Some(self.input(Tensor::scalar(1.0)));
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !needs[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (slot, parent) in op.parents().into_iter().enumerate() {
                if !needs[parent.0] {
                    continue;
                }
                if let Some(contrib) = self.vjp(NodeId(i), &op, slot, g)? {
                    grads[parent.0] = Some(match grads[parent.0] {
                        None => contrib,
                        Some(prev) => self.add(prev, contrib)?,
                    });
                }
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.value(*w).shape());
                    Ok(self.input(zeros))
                }
            })
            .collect()
    }

    /// Gradient values only; the backward nodes are discarded afterwards.
    pub fn gradient_values(&mut self, target: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let ids = self.gradient(target, wrt)?;
        let out = ids.iter().map(|&id| self.value(id).clone()).collect();
        self.truncate(mark);
        Ok(out)
    }

    /// Contribution of upstream gradient `g` at `node` to parent number `slot`.
    /// `None` means the contribution is identically zero.
    fn vjp(&mut self, node: NodeId, op: &Op, slot: usize, g: NodeId) -> Result<Option<NodeId>> {
        let shape_of = |t: &Tape, id: NodeId| t.value(id).shape().to_vec();
        let c = match op {
            Op::Leaf => return Ok(None),
            Op::Add(..) => g,
            Op::Sub(..) => {
                if slot == 0 {
                    g
                } else {
                    self.neg(g)?
                }
            }
            Op::Mul(a, b) => {
                let other = if slot == 0 { *b } else { *a };
                self.mul(g, other)?
            }
            Op::Neg(_) => self.neg(g)?,
            Op::Scale(_, f) => self.scale(g, *f)?,
            Op::Abs(a) => {
                let s = self.sign(*a)?;
                self.mul(g, s)?
            }
            Op::Sign(_) | Op::ReluMask(_) => return Ok(None),
            Op::Relu(a) => {
                let m = self.relu_mask(*a)?;
                self.mul(g, m)?
            }
            Op::Tanh(a) => {
                let d = self.push(Op::TanhDeriv(*a))?;
                self.mul(g, d)?
            }
            Op::TanhDeriv(a) => {
                // d/dx (1 - t^2) = -2 t (1 - t^2)
                let t = self.tanh(*a)?;
                let t = self.scale(t, -2.0)?;
                let d = self.push(Op::TanhDeriv(*a))?;
                let dd = self.mul(t, d)?;
                self.mul(g, dd)?
            }
            Op::SumAll(a) => {
                let s = shape_of(self, *a);
                self.fill(g, &s)?
            }
            Op::Fill(..) => self.sum(g)?,
            Op::Reshape(a, _) => {
                let s = shape_of(self, *a);
                self.reshape(g, &s)?
            }
            Op::AddChannelBias(..) => {
                if slot == 0 {
                    g
                } else {
                    self.sum_to_channels(g)?
                }
            }
            Op::SumToChannels(x) => {
                let s = shape_of(self, *x);
                self.broadcast_channels(g, &s)?
            }
            Op::BroadcastChannels(..) => self.sum_to_channels(g)?,
            Op::BroadcastBatch(..) => self.sum_batch(g)?,
            Op::SumBatch(x) => {
                let batch = self.value(*x).shape()[0];
                self.broadcast_batch(g, batch)?
            }
            Op::Conv1d(x, k) => {
                if slot == 0 {
                    let kt = self.flip_transpose(*k)?;
                    self.conv1d(g, kt)?
                } else {
                    let width = self.value(*k).shape()[2];
                    self.conv_kernel_grad(*x, g, width)?
                }
            }
            Op::ConvKernelGrad { input, upstream, .. } => {
                if slot == 0 {
                    let gt = self.flip_transpose(g)?;
                    self.conv1d(*upstream, gt)?
                } else {
                    self.conv1d(*input, g)?
                }
            }
            Op::FlipTranspose(_) => self.flip_transpose(g)?,
            Op::Local {
                input,
                weight,
                stride,
            } => {
                if slot == 0 {
                    let len = self.value(*input).shape()[2];
                    self.push(Op::LocalInputGrad {
                        weight: *weight,
                        upstream: g,
                        len,
                        stride: *stride,
                    })?
                } else {
                    let width = self.value(*weight).shape()[3];
                    self.push(Op::LocalWeightGrad {
                        input: *input,
                        upstream: g,
                        width,
                        stride: *stride,
                    })?
                }
            }
            Op::LocalInputGrad {
                weight,
                upstream,
                stride,
                ..
            } => {
                if slot == 0 {
                    let width = self.value(*weight).shape()[3];
                    self.push(Op::LocalWeightGrad {
                        input: g,
                        upstream: *upstream,
                        width,
                        stride: *stride,
                    })?
                } else {
                    self.locally_connected(g, *weight, *stride)?
                }
            }
            Op::LocalWeightGrad {
                input,
                upstream,
                stride,
                ..
            } => {
                if slot == 0 {
                    let len = self.value(*input).shape()[2];
                    self.push(Op::LocalInputGrad {
                        weight: g,
                        upstream: *upstream,
                        len,
                        stride: *stride,
                    })?
                } else {
                    self.locally_connected(*input, g, *stride)?
                }
            }
            Op::MatMul { a, b, ta, tb } => match (slot, *ta, *tb) {
                (0, false, tb) => self.matmul(g, *b, false, !tb)?,
                (0, true, tb) => self.matmul(*b, g, tb, true)?,
                (_, ta, false) => self.matmul(*a, g, !ta, false)?,
                (_, ta, true) => self.matmul(g, *a, true, ta)?,
            },
            Op::Softmax(_) => self.push(Op::SoftmaxGrad {
                probs: node,
                upstream: g,
            })?,
            Op::SoftmaxGrad { probs, upstream } => {
                if slot == 0 {
                    // g ⊙ (u − rowsum(u ⊙ p)) − u ⊙ rowsum(g ⊙ p), with u this node's upstream input
                    let gp = self.mul(g, *probs)?;
                    let t = self.row_sum_broadcast(gp)?;
                    let up = self.mul(*upstream, *probs)?;
                    let s = self.row_sum_broadcast(up)?;
                    let d = self.sub(*upstream, s)?;
                    let a = self.mul(g, d)?;
                    let b = self.mul(*upstream, t)?;
                    self.sub(a, b)?
                } else {
                    self.push(Op::SoftmaxGrad { probs: *probs, upstream: g })?
                }
            }
            Op::LogSoftmax(a) => {
                // g - softmax(a) * rowsum(g)
                let p = self.softmax(*a)?;
                let s = self.row_sum_broadcast(g)?;
                let ps = self.mul(p, s)?;
                self.sub(g, ps)?
            }
            Op::RowSumBroadcast(_) => self.row_sum_broadcast(g)?,
            Op::Gather(a, idx) => {
                let cols = self.value(*a).shape()[1];
                self.push(Op::Scatter(g, idx.clone(), cols))?
            }
            Op::Scatter(_, idx, _) => self.push(Op::Gather(g, idx.clone()))?,
            Op::Custom(custom, inputs) => self.push(Op::CustomGrad {
                op: custom.clone(),
                inputs: inputs.clone(),
                output: node,
                upstream: g,
                index: slot,
            })?,
            Op::CustomGrad { op: custom, .. } => {
                return Err(AdError::UnsupportedOp {
                    node: node.0,
                    op: format!("gradient of custom op `{}`", custom.name()),
                })
            }
        };
        Ok(Some(c))
    }
}
