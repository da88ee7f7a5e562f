//! The computation tape.
//!
//! Every op appends one node holding its output value; node ids are handed
//! out as [`Var`]s. Nodes are therefore topologically ordered by
//! construction and [`Graph::backward`] simply walks them in reverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::flops::FlopTally;
use crate::ops::{BinaryKind, ConvSpec, Op, UnaryKind};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    tally: Option<FlopTally>,
    audit: bool,
}

/// Gradients of a scalar with respect to every leaf that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts counting operations per op kind from this point on.
    pub fn enable_flop_tally(&mut self) {
        self.tally.get_or_insert_with(FlopTally::default);
    }

    pub fn flop_tally(&self) -> Option<&FlopTally> {
        self.tally.as_ref()
    }

    /// Rejects any op that turns finite inputs into NaN or infinity.
    pub fn set_audit(&mut self, on: bool) {
        self.audit = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// `(op name, output shape)` for each recorded node, in tape order.
    pub fn node_shapes(&self) -> impl Iterator<Item = (&'static str, &[usize])> {
        self.nodes.iter().map(|n| (n.op.name(), n.value.shape()))
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let value = op.forward(&xs)?;
            if self.audit && !value.is_finite() && xs.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(op.name()));
            }
            if let Some(t) = self.tally.as_mut() {
                let shapes: Vec<&[usize]> = xs.iter().map(|x| x.shape()).collect();
                t.record(op.name(), op.flops(&shapes, value.shape()));
            }
            value
        };
        let requires_grad = !matches!(op, Op::Detach) && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, inputs: inputs.to_vec(), value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode accumulation from a scalar node. Leaves that require a
    /// gradient but do not influence `loss` receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(shape));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let xs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let local = node.op.backward(&xs, &node.value, &g, &need)?;
            for ((input, gi), needed) in node.inputs.iter().zip(local).zip(need) {
                let (Some(gi), true) = (gi, needed) else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                grads[i].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Re-evaluates every recorded op from its recorded inputs and reports
    /// whether all outputs come out bit-identical.
    pub fn replay(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let xs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            if !node.op.forward(&xs)?.bit_eq(&node.value) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    // ---- builders -------------------------------------------------------

    fn binary(&mut self, k: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Binary(k), &[a, b])
    }

    fn unary(&mut self, k: UnaryKind, x: Var) -> Var {
        self.apply(Op::Unary(k), &[x]).expect("unary ops cannot fail")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Maximum, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Minimum, a, b)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(UnaryKind::Affine { scale, shift }, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, 1.0, s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Atan, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clamp { lo, hi }, x)
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.clamp(x, lo, f64::INFINITY)
    }

    pub fn detach(&mut self, x: Var) -> Var {
        self.apply(Op::Detach, &[x]).expect("detach cannot fail")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.apply(Op::Sum, &[x]).expect("sum cannot fail")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.apply(Op::Mean, &[x]).expect("mean cannot fail")
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::SumAxis(axis), &[x])
    }

    /// Max along `axis`, keeping it with extent 1.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::MaxAxis(axis), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax(axis), &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LogSoftmax(axis), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::TransposeLast, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat(axis), xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, len }, &[x])
    }

    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.apply(Op::IndexSelect(rows.to_vec()), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        match b {
            Some(b) => self.apply(Op::Conv2d { spec, bias: true }, &[x, w, b]),
            None => self.apply(Op::Conv2d { spec, bias: false }, &[x, w]),
        }
    }

    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        match b {
            Some(b) => self.apply(Op::DeformConv2d { spec, bias: true }, &[x, offsets, w, b]),
            None => self.apply(Op::DeformConv2d { spec, bias: false }, &[x, offsets, w]),
        }
    }

    pub fn max_pool(&mut self, x: Var, spec: ConvSpec) -> Result<Var> {
        self.apply(Op::MaxPool2d(spec), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.apply(Op::Bilinear { out_h, out_w }, &[x])
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Op::BatchNorm { eps }, &[x, gamma, beta])
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
        self.apply(Op::BatchNormEval { eps }, &[x, gamma, beta, mean, var])
    }

    /// Elementwise binary cross-entropy on logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        if self.requires_grad(targets) {
            return Err(shape_err("bce_with_logits", "targets must be constant"));
        }
        self.apply(Op::BceWithLogits, &[logits, targets])
    }
}
