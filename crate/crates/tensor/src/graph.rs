//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, so node ids are already a topological order. [`Graph::backward`]
//! walks the tape once in reverse and returns gradients for every leaf that
//! was registered with `requires_grad`.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels::ConvGeometry;
use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Clamp { x: usize, lo: T, hi: T },
    Sum(usize),
    SumAxes(usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Roll { x: usize, shifts: Vec<isize> },
    Slice { x: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Conv { x: usize, w: usize, b: Option<usize>, geo: ConvGeometry },
    ConvTransposed { x: usize, w: usize, b: Option<usize>, geo: ConvGeometry },
    LayerNorm { x: usize, gain: usize, offset: usize, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: usize, axis: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::Sum(..) => "sum",
            Op::SumAxes(..) => "sum_axes",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Roll { .. } => "roll",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Conv { .. } => "conv3d",
            Op::ConvTransposed { .. } => "conv3d_transposed",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Computation tape. Confined to one thread; rebuild it for every step.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf, tracking gradients iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let requires_grad = tensor.requires_grad();
        self.push_node(tensor, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push_node(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push_node(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn push_node(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Records an op node. Saved state is dropped when no input needs a gradient.
    pub(crate) fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(value, op, requires_grad)
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients reaching a node along several paths are summed. Only leaves
    /// keep their gradient in the result.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(TensorError::Usage("loss belongs to a different graph".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::new();
        leaf_grads.resize_with(nodes.len(), || None);
        if !root.requires_grad {
            return Ok(Gradients { grads: leaf_grads });
        }
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            let contributions = crate::backward::propagate(&nodes, node, &g)
                .map_err(|e| match e {
                    TensorError::Usage(msg) => {
                        TensorError::Usage(format!("{}: {msg}", node.op.name()))
                    }
                    other => other,
                })?;
            for (parent, delta) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += *d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }
}
