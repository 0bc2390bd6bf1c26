//! Record-then-replay reverse mode over the fixed operation set in
//! [`crate::ops`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::activation::{gelu_grad_scalar, gelu_scalar, sigmoid_scalar};
use crate::ops::conv::{
    conv1x1_grouped_backward, conv1x1_grouped_raw, conv2d, conv2d_backward, conv_depthwise_backward,
    conv_depthwise_raw, Conv1x1Grouped, ConvDepthwise,
};
use crate::ops::head::{cross_entropy, cross_entropy_backward, linear, linear_backward};
use crate::ops::norm::{layernorm_backward, layernorm_forward, LayerNormCache, LayerNormChannels};
use crate::ops::spatial::{
    broadcast_add, broadcast_mul, broadcast_mul_backward, channel_affine, channel_shuffle, global_avg_pool,
    global_avg_pool_backward, grid_to_tokens, sigmoid_gate, sigmoid_gate_backward, tokens_to_grid, Gate,
};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation identifiers, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Conv1x1,
    Depthwise,
    Conv2d,
    Gelu,
    Sigmoid,
    LayerNorm,
    GlobalAvgPool,
    ChannelShuffle,
    SigmoidGate,
    BroadcastMul,
    BroadcastAdd,
    ChannelAffine,
    Reshape,
    Linear,
    CrossEntropy,
    TokensToGrid,
    GridToTokens,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Leaf,
        OpKind::Constant,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Conv1x1,
        OpKind::Depthwise,
        OpKind::Conv2d,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::LayerNorm,
        OpKind::GlobalAvgPool,
        OpKind::ChannelShuffle,
        OpKind::SigmoidGate,
        OpKind::BroadcastMul,
        OpKind::BroadcastAdd,
        OpKind::ChannelAffine,
        OpKind::Reshape,
        OpKind::Linear,
        OpKind::CrossEntropy,
        OpKind::TokensToGrid,
        OpKind::GridToTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Conv1x1 => "conv1x1_grouped",
            OpKind::Depthwise => "conv_depthwise",
            OpKind::Conv2d => "conv2d",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LayerNorm => "layernorm_channels",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::ChannelShuffle => "channel_shuffle",
            OpKind::SigmoidGate => "sigmoid_gate",
            OpKind::BroadcastMul => "broadcast_mul",
            OpKind::BroadcastAdd => "broadcast_add",
            OpKind::ChannelAffine => "channel_affine",
            OpKind::Reshape => "reshape",
            OpKind::Linear => "linear",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::TokensToGrid => "tokens_to_grid",
            OpKind::GridToTokens => "grid_to_tokens",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown operation `{s}`")))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Conv1x1 {
        x: Var,
        w: Var,
        b: Var,
        groups: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    GlobalAvgPool(Var),
    ChannelShuffle {
        x: Var,
        groups: usize,
    },
    SigmoidGate {
        pooled: Var,
        w: Var,
        b: Var,
    },
    BroadcastMul {
        x: Var,
        g: Var,
    },
    BroadcastAdd {
        x: Var,
        p: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    TokensToGrid(Var),
    GridToTokens {
        x: Var,
        height: usize,
        width: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
            Op::Conv1x1 { .. } => OpKind::Conv1x1,
            Op::Depthwise { .. } => OpKind::Depthwise,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GlobalAvgPool(..) => OpKind::GlobalAvgPool,
            Op::ChannelShuffle { .. } => OpKind::ChannelShuffle,
            Op::SigmoidGate { .. } => OpKind::SigmoidGate,
            Op::BroadcastMul { .. } => OpKind::BroadcastMul,
            Op::BroadcastAdd { .. } => OpKind::BroadcastAdd,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Linear { .. } => OpKind::Linear,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::TokensToGrid(..) => OpKind::TokensToGrid,
            Op::GridToTokens { .. } => OpKind::GridToTokens,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Gelu(a) | Op::Sigmoid(a) | Op::GlobalAvgPool(a) => vec![a],
            Op::Reshape(a) | Op::TokensToGrid(a) => vec![a],
            Op::Conv1x1 { x, w, b, .. }
            | Op::Depthwise { x, w, b }
            | Op::Conv2d { x, w, b, .. }
            | Op::Linear { x, w, b } => vec![x, w, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::ChannelShuffle { x, .. } | Op::GridToTokens { x, .. } => vec![x],
            Op::SigmoidGate { pooled, w, b } => vec![pooled, w, b],
            Op::BroadcastMul { x, g } => vec![x, g],
            Op::BroadcastAdd { x, p } => vec![x, p],
            Op::ChannelAffine { x, scale, shift } => vec![x, scale, shift],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A single-use tape: record a forward pass, then call [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients of a scalar loss with respect to every leaf on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` for non-leaf handles.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Multiplier applied to a faulted operation's adjoints.
const FAULT_FACTOR: f64 = 1.5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass deliberately corrupts the adjoint of one
    /// operation kind. Used to prove the gradient checker catches bugs.
    pub fn with_fault(fault: Option<OpKind>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            ref other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (a trainable parameter or a checked input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), v)
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// `sum(a * weights)` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let w = self.constant(weights);
        let m = self.mul(a, w)?;
        Ok(self.sum(m))
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var, groups: usize) -> Result<Var> {
        let v = conv1x1_grouped_raw(self.value(x), self.value(w), self.value(b), groups)?;
        Ok(self.push(Op::Conv1x1 { x, w, b, groups }, v))
    }

    pub fn conv1x1_layer(&mut self, x: Var, layer: &Conv1x1Grouped<Var>) -> Result<Var> {
        self.conv1x1(x, layer.weight, layer.bias, layer.groups)
    }

    pub fn depthwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = conv_depthwise_raw(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Depthwise { x, w, b }, v))
    }

    pub fn depthwise_layer(&mut self, x: Var, layer: &ConvDepthwise<Var>) -> Result<Var> {
        self.depthwise(x, layer.weight, layer.bias)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let v = conv2d(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride }, v))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_scalar);
        self.push(Op::Gelu(x), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid_scalar);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (v, cache) = layernorm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, cache }, v))
    }

    pub fn layernorm_layer(&mut self, x: Var, layer: &LayerNormChannels<Var>) -> Result<Var> {
        self.layernorm(x, layer.gamma, layer.beta, layer.eps)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool(x), v))
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let v = channel_shuffle(self.value(x), groups)?;
        Ok(self.push(Op::ChannelShuffle { x, groups }, v))
    }

    pub fn sigmoid_gate(&mut self, pooled: Var, w: Var, b: Var) -> Result<Var> {
        let v = sigmoid_gate(self.value(pooled), self.value(w), self.value(b))?;
        Ok(self.push(Op::SigmoidGate { pooled, w, b }, v))
    }

    pub fn gate_layer(&mut self, pooled: Var, gate: &Gate<Var>) -> Result<Var> {
        self.sigmoid_gate(pooled, gate.weight, gate.bias)
    }

    pub fn broadcast_mul(&mut self, x: Var, g: Var) -> Result<Var> {
        let v = broadcast_mul(self.value(x), self.value(g))?;
        Ok(self.push(Op::BroadcastMul { x, g }, v))
    }

    pub fn broadcast_add(&mut self, x: Var, p: Var) -> Result<Var> {
        let v = broadcast_add(self.value(x), self.value(p))?;
        Ok(self.push(Op::BroadcastAdd { x, p }, v))
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let v = channel_affine(self.value(x), self.value(scale), self.value(shift))?;
        Ok(self.push(Op::ChannelAffine { x, scale, shift }, v))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear { x, w, b }, v))
    }

    /// Mean softmax cross-entropy over the batch, as a `[1]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn tokens_to_grid(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let v = tokens_to_grid(self.value(x), height, width)?;
        Ok(self.push(Op::TokensToGrid(x), v))
    }

    pub fn grid_to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape4()?;
        let v = grid_to_tokens(self.value(x))?;
        Ok(self.push(
            Op::GridToTokens {
                x,
                height: s.height,
                width: s.width,
            },
            v,
        ))
    }

    /// Reverse pass from a scalar loss. Every leaf on the tape gets an
    /// entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward on an empty tape".into()));
        }
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff(format!("loss handle {} is not on this tape", loss.0)))?;
        if root.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::ones(root.value.shape().to_vec())?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Constant) || !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let mut contributions = self.adjoints(&node.op, &node.value, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, t) in contributions.iter_mut() {
                    *t = t.scale(FAULT_FACTOR);
                }
            }
            for (var, t) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut adj[var.0] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
        }

        let mut grads = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(match adj.get_mut(i).and_then(|a| a.take()) {
                    Some(g) => g,
                    None => Tensor::zeros_like(&node.value),
                });
            }
        }
        Ok(Gradients { grads })
    }

    /// Input adjoints of one node given its output adjoint.
    fn adjoints(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match *op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(a, g.mul(val(b))?), (b, g.mul(val(a))?)],
            Op::Scale(a, f) => vec![(a, g.scale(f))],
            Op::Sum(a) => {
                let x = val(a);
                vec![(a, Tensor::full(x.shape().to_vec(), g.data()[0])?)]
            }
            Op::Conv1x1 { x, w, b, groups } => {
                let (dx, dw, db) = conv1x1_grouped_backward(val(x), val(w), groups, g)?;
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::Depthwise { x, w, b } => {
                let (dx, dw, db) = conv_depthwise_backward(val(x), val(w), g)?;
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::Conv2d { x, w, b, stride } => {
                let (dx, dw, db) = conv2d_backward(val(x), val(w), stride, g)?;
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::Gelu(a) => {
                let d = val(a).map(gelu_grad_scalar);
                vec![(a, d.mul(g)?)]
            }
            Op::Sigmoid(a) => {
                let d = out.map(|s| s * (1.0 - s));
                vec![(a, d.mul(g)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref cache,
            } => {
                let (dx, dg, db) = layernorm_backward(cache, val(gamma), g)?;
                vec![(x, dx), (gamma, dg), (beta, db)]
            }
            Op::GlobalAvgPool(a) => {
                vec![(a, global_avg_pool_backward(val(a).shape4()?, g)?)]
            }
            Op::ChannelShuffle { x, groups } => {
                let c = val(x).shape4()?.channels;
                vec![(x, channel_shuffle(g, c / groups)?)]
            }
            Op::SigmoidGate { pooled, w, b } => {
                let (dp, dw, db) = sigmoid_gate_backward(val(pooled), val(w), out, g)?;
                vec![(pooled, dp), (w, dw), (b, db)]
            }
            Op::BroadcastMul { x, g: gate } => {
                let (dx, dg) = broadcast_mul_backward(val(x), val(gate), g)?;
                vec![(x, dx), (gate, dg)]
            }
            Op::BroadcastAdd { x, p } => {
                let s = val(x).shape4()?;
                let plane = s.plane();
                let dp = g.data().chunks_exact(plane).map(|c| c.iter().sum()).collect();
                vec![(x, g.clone()), (p, Tensor::new(val(p).shape().to_vec(), dp)?)]
            }
            Op::ChannelAffine { x, scale, shift } => {
                let s = val(x).shape4()?;
                let plane = s.plane();
                let sc = val(scale).data();
                let mut dx = g.data().to_vec();
                let mut dscale = vec![0.0; s.channels];
                let mut dshift = vec![0.0; s.channels];
                for (i, (chunk, xs)) in dx
                    .chunks_exact_mut(plane)
                    .zip(val(x).data().chunks_exact(plane))
                    .enumerate()
                {
                    let c = i % s.channels;
                    dshift[c] += chunk.iter().sum::<f64>();
                    dscale[c] += chunk.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    chunk.iter_mut().for_each(|v| *v *= sc[c]);
                }
                vec![
                    (x, Tensor::from_shape4(s, dx)?),
                    (scale, Tensor::vector(dscale)?),
                    (shift, Tensor::vector(dshift)?),
                ]
            }
            Op::Reshape(a) => vec![(a, g.reshape(val(a).shape().to_vec())?)],
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = linear_backward(val(x), val(w), g)?;
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::CrossEntropy {
                logits,
                ref labels,
                ref probs,
            } => vec![(logits, cross_entropy_backward(probs, labels, g.data()[0])?)],
            Op::TokensToGrid(a) => vec![(a, grid_to_tokens(g)?)],
            Op::GridToTokens { x, height, width } => vec![(x, tokens_to_grid(g, height, width)?)],
        })
    }
}
