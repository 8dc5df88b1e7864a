use super::scalar::Float;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero-padding rule for [`Tape::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output length equals input length (stride 1 only); an even kernel gets
    /// the extra zero on the right.
    Same,
}

#[derive(Debug)]
pub(super) enum Op<F> {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Relu {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Broadcast {
        a: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    MeanLast {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<F>,
        rstds: Vec<F>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad_left: usize,
        cols: Vec<F>,
    },
    ConvTranspose1d {
        y: Var,
        w: Var,
        stride: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    Transpose2d {
        a: Var,
    },
    SwapLeading {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Chunk {
        a: Var,
        chunk: usize,
    },
    OverlapAdd {
        a: Var,
        coverage: Vec<usize>,
    },
    Sum {
        a: Var,
    },
}

impl<F> Op<F> {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Broadcast { .. } => "broadcast",
            Op::Concat { .. } => "concat",
            Op::SliceLast { .. } => "slice_last",
            Op::MeanLast { .. } => "avg_pool_time",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Linear { .. } => "linear",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv1d_transpose",
            Op::Attention { .. } => "attention",
            Op::Transpose2d { .. } => "transpose",
            Op::SwapLeading { .. } => "swap_leading",
            Op::Reshape { .. } => "reshape",
            Op::Chunk { .. } => "chunk",
            Op::OverlapAdd { .. } => "overlap_add",
            Op::Sum { .. } => "sum",
        }
    }

    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Tanh { a }
            | Op::Sigmoid { a }
            | Op::Broadcast { a }
            | Op::SliceLast { a, .. }
            | Op::MeanLast { a }
            | Op::Softmax { a }
            | Op::Transpose2d { a }
            | Op::SwapLeading { a }
            | Op::Reshape { a }
            | Op::Chunk { a, .. }
            | Op::OverlapAdd { a, .. }
            | Op::Sum { a } => vec![*a],
            Op::Concat { inputs } => inputs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Linear { x, w, b } | Op::Conv1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::ConvTranspose1d { y, w, .. } => vec![*y, *w],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

pub(super) struct Node<F> {
    pub(super) value: Tensor<F>,
    pub(super) op: Op<F>,
    pub(super) needs_grad: bool,
}

/// Record of executed primitives, in execution (hence topological) order.
///
/// Values are added with [`Tape::leaf`] (differentiable) or
/// [`Tape::constant`]; every primitive appends one node. Any primitive whose
/// result is not finite fails with [`Error::Numeric`].
pub struct Tape<F> {
    pub(super) nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a differentiable input.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(super) fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_seeded(loss, Tensor::full(value.shape(), F::one()))
    }

    /// Reverse sweep from `out` with an explicit upstream gradient of the same
    /// shape. Only gradients of leaves are kept.
    pub fn backward_seeded(&self, out: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::invalid(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(n.value.shape(), g)).transpose(),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }
}

/// Leaf gradients from one reverse sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a leaf, or `None` when the leaf was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; unreached leaves get zeros of `shape`.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
