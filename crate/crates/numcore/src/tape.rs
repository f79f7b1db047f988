use crate::error::{Result, TensorError};
use crate::ops::{conv, elementwise, linalg, norm, reduce, shape};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Unary {
    Sqrt,
    Exp,
    Ln,
    Gelu,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Softplus,
    Abs,
    Square,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// How a partial convolution rescales the visible part of each window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PconvScaling {
    /// Multiply by `1 / sum(mask)`.
    #[default]
    InverseCoverage,
    /// Multiply by `window_size / sum(mask)`, the usual partial-conv ratio.
    Canonical,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Softmax(Var, usize),
    PairSoftmax(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: conv::Geometry,
        cols: Vec<f64>,
    },
    PartialConv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: conv::Geometry,
        cols: Vec<f64>,
        scale: Vec<f64>,
        mask: Vec<f64>,
    },
    UpsampleNearest(Var, usize),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::BatchMatMul(a, b) | Op::PairSoftmax(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Unary(_, x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis(x, _)
            | Op::Softmax(x, _)
            | Op::UpsampleNearest(x, _) => vec![*x],
            Op::Slice { x, .. } | Op::IndexSelect { x, .. } | Op::MaxAxis { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::AddBias { x, bias, .. } => vec![*x, *bias],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::PartialConv2d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Nodes are appended in execution order, which is a topological
/// order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// A trainable leaf: receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a new constant leaf, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over fan-out and replace those of any earlier call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.backward_node(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary(kind, a, b) => elementwise::binary_backward(*kind, *a, val(a), *b, val(b), g),
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Unary(kind, x) => vec![(*x, elementwise::unary_backward(*kind, val(x), out, g))],
            Op::MatMul(a, b) => linalg::matmul_backward(*a, val(a), *b, val(b), g),
            Op::BatchMatMul(a, b) => linalg::bmm_backward(*a, val(a), *b, val(b), g),
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute(x, perm) => vec![(*x, shape::permute_backward(val(x).shape(), perm, g))],
            Op::Concat(xs, axis) => {
                let shapes: Vec<&[usize]> = xs.iter().map(|x| val(x).shape()).collect();
                xs.iter()
                    .copied()
                    .zip(shape::concat_backward(&shapes, *axis, g))
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                vec![(*x, shape::slice_backward(val(x).shape(), *axis, *start, out.shape(), g))]
            }
            Op::IndexSelect { x, axis, indices } => {
                vec![(*x, shape::index_select_backward(val(x).shape(), *axis, indices, g))]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(x).numel()])],
            Op::Mean(x) => {
                let n = val(x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::SumAxis(x, axis) => vec![(*x, reduce::sum_axis_backward(val(x).shape(), *axis, g))],
            Op::MaxAxis { x, axis, argmax } => {
                vec![(*x, reduce::max_axis_backward(val(x).shape(), *axis, argmax, g))]
            }
            Op::Softmax(x, axis) => vec![(*x, reduce::softmax_backward(out, *axis, g))],
            Op::PairSoftmax(a, b) => reduce::pair_softmax_backward(*a, *b, out, g),
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => norm::layer_norm_backward(
                (*x, *gain, *bias),
                val(x).shape(),
                val(gain),
                *axis,
                xhat,
                inv_std,
                g,
            ),
            Op::AddBias { x, bias, axis } => norm::add_bias_backward(*x, val(x).shape(), *bias, *axis, g),
            Op::Conv2d { x, w, b, geom, cols } => conv::conv2d_backward(*x, *w, *b, val(w), geom, cols, g),
            Op::PartialConv2d {
                x,
                w,
                b,
                geom,
                cols,
                scale,
                mask,
            } => conv::partial_conv2d_backward((*x, *w, *b), val(w), geom, cols, scale, mask, g),
            Op::UpsampleNearest(x, factor) => {
                vec![(*x, shape::upsample_nearest_backward(val(x).shape(), *factor, g))]
            }
        }
    }
}
