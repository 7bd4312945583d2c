//! Operation record for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and enough saved state to
//! run its vector-Jacobian product. Nodes are only ever appended, so a node's
//! inputs always precede it and the record is acyclic by construction.

use crate::error::{Result, TensorError};
use crate::ops::conv::ConvGeom;
use crate::ops::elementwise::{BinaryKind, UnaryKind};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Resize { input: Var },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Bmm { a: Var, b: Var, transpose_b: bool },
    Unary { input: Var, kind: UnaryKind },
    Scale { input: Var, factor: T },
    AddScalar { input: Var },
    Binary { a: Var, b: Var, kind: BinaryKind },
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    MaxAxis { input: Var, argmax: Vec<usize> },
    SumAll { input: Var },
    MeanAll { input: Var },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    Reshape { input: Var },
    Permute { input: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize { .. } => "bilinear_resize",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::Unary { kind, .. } => kind.name(),
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Binary { kind, .. } => kind.name(),
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { input, weight, bias, .. } | Op::Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Bmm { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::BatchNorm { input, gamma, beta, .. } | Op::LayerNorm { input, gamma, beta, .. } => {
                vec![*input, *gamma, *beta]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Resize { input }
            | Op::MaxPool2d { input, .. }
            | Op::Unary { input, .. }
            | Op::Scale { input, .. }
            | Op::AddScalar { input }
            | Op::SumAxis { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::MaxAxis { input, .. }
            | Op::SumAll { input }
            | Op::MeanAll { input }
            | Op::Softmax { input, .. }
            | Op::LogSoftmax { input, .. }
            | Op::Reshape { input }
            | Op::Permute { input, .. }
            | Op::Slice { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node<T: Real> {
    pub(crate) dims: Vec<usize>,
    /// Empty when the tape runs in shape-only mode.
    pub(crate) value: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Computation record. Build a forward pass through the op methods, then call
/// [`Tape::backward`] on a scalar output.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    shape_only: bool,
    check_finite: bool,
    grad_enabled: bool,
    macs: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), shape_only: false, check_finite: false, grad_enabled: true, macs: 0 }
    }

    /// A tape that propagates dims (and multiply-accumulate counts) without
    /// computing any values.
    pub fn shape_only() -> Self {
        Self { shape_only: true, ..Self::new() }
    }

    /// Reject every op whose output holds NaN or ±Inf.
    pub fn with_finite_check(mut self) -> Self {
        self.check_finite = true;
        self
    }

    /// Parameters bound to this tape never require gradients.
    pub fn without_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by conv, linear and bmm ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let dims = t.dims().to_vec();
        let value = if self.shape_only { Vec::new() } else { t.into_data() };
        self.nodes.push(Node { dims, value, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients are accumulated for.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let v = self.input(t);
        self.nodes[v.0].requires_grad = self.grad_enabled;
        v
    }

    /// Leaf carrying only dims; valid in shape-only mode.
    pub fn placeholder(&mut self, dims: &[usize]) -> Var {
        let value = if self.shape_only { Vec::new() } else { vec![T::zero(); numel(dims)] };
        self.nodes.push(Node { dims: dims.to_vec(), value, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.value(id);
        let value = if self.shape_only { Vec::new() } else { t.data().to_vec() };
        self.nodes.push(Node {
            dims: t.dims().to_vec(),
            value,
            requires_grad: self.grad_enabled && store.is_trainable(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, dims: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert!(self.shape_only || value.len() == numel(&dims));
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let name = op.name();
        self.nodes.push(Node { dims, value, requires_grad, op });
        let id = self.nodes.len() - 1;
        if self.check_finite && !self.nodes[id].value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name, node: id });
        }
        Ok(Var(id))
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        if self.shape_only {
            Tensor::zeros(n.dims.clone())
        } else {
            Tensor::new(n.dims.clone(), n.value.clone()).expect("node value matches dims")
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First node (in evaluation order) whose value holds NaN or ±Inf.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.iter().all(|v| v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Bindings of store parameters to the nodes that read them.
    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }

    /// Reverse sweep from a scalar `loss`. Only leaves and parameters that
    /// require gradients receive one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape_only {
            return Err(TensorError::Usage("backward on a shape-only tape".into()));
        }
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| TensorError::Usage(format!("loss {loss:?} is not on this tape")))?;
        if loss_node.value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                loss_node.dims
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            for (input, contribution) in self.vjp(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += *c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads, dims: self.nodes.iter().map(|n| n.dims.clone()).collect() })
    }

    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        use crate::ops::*;
        let node = &self.nodes[i];
        let want = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { input, weight, bias, geom } => {
                conv::backward(self, *input, *weight, *bias, geom, g, want(input), want(weight))
            }
            Op::Resize { input } => vec![(*input, resize::backward(self.dims(*input), &node.dims, g))],
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![T::zero(); self.data(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                vec![(*input, dx)]
            }
            Op::Linear { input, weight, bias } => linalg::linear_backward(self, *input, *weight, *bias, g),
            Op::Bmm { a, b, transpose_b } => linalg::bmm_backward(self, *a, *b, *transpose_b, g),
            Op::Unary { input, kind } => {
                vec![(*input, elementwise::unary_backward(*kind, self.data(*input), &node.value, g))]
            }
            Op::Scale { input, factor } => vec![(*input, g.iter().map(|&v| v * *factor).collect())],
            Op::AddScalar { input } => vec![(*input, g.to_vec())],
            Op::Binary { a, b, kind } => elementwise::binary_backward(self, *a, *b, *kind, &node.dims, g),
            Op::SumAxis { input, axis } => vec![(*input, reduce::sum_axis_backward(self.dims(*input), *axis, g, T::one()))],
            Op::MeanAxis { input, axis } => {
                let n = T::from_usize(self.dims(*input)[*axis]).unwrap();
                vec![(*input, reduce::sum_axis_backward(self.dims(*input), *axis, g, T::one() / n))]
            }
            Op::MaxAxis { input, argmax, .. } => {
                let mut dx = vec![T::zero(); self.data(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                vec![(*input, dx)]
            }
            Op::SumAll { input } => vec![(*input, vec![g[0]; self.data(*input).len()])],
            Op::MeanAll { input } => {
                let n = self.data(*input).len();
                vec![(*input, vec![g[0] / T::from_usize(n).unwrap(); n])]
            }
            Op::Softmax { input, axis } => vec![(*input, reduce::softmax_backward(&node.dims, *axis, &node.value, g))],
            Op::LogSoftmax { input, axis } => {
                vec![(*input, reduce::log_softmax_backward(&node.dims, *axis, &node.value, g))]
            }
            Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::Permute { input, perm } => vec![(*input, shape::permute_backward(self.dims(*input), perm, g))],
            Op::Concat { inputs, axis } => shape::concat_backward(self, inputs, *axis, &node.dims, g),
            Op::Slice { input, axis, start } => {
                vec![(*input, shape::slice_backward(self.dims(*input), *axis, *start, &node.dims, g))]
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std } => {
                norm::batch_norm_backward(self, *input, *gamma, *beta, xhat, inv_std, g)
            }
            Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
                norm::layer_norm_backward(self, *input, *gamma, *beta, xhat, inv_std, g)
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(self.dims[v.0].clone(), g.clone()).expect("gradient matches dims"))
    }

    /// Gradients for every trainable parameter bound on `tape`, summed over
    /// repeated bindings of the same parameter.
    pub fn param_grads(&self, tape: &Tape<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (id, var) in tape.param_nodes() {
            let Some(g) = self.get(var) else { continue };
            match out.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                None => out.push((id, g)),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
