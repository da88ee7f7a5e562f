use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    /// `scale * x + shift`
    Affine { scale: f64, shift: f64 },
    Exp,
    Log,
    Relu,
    Sigmoid,
    Silu,
    Atan,
    Sqrt,
    Square,
    Clamp { lo: f64, hi: f64 },
}

impl BinaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
            BinaryKind::Maximum => "maximum",
            BinaryKind::Minimum => "minimum",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
            BinaryKind::Maximum => a.max(b),
            BinaryKind::Minimum => a.min(b),
        }
    }

    /// Comparisons are free under the counting convention.
    pub(crate) fn counts_flops(self) -> bool {
        !matches!(self, BinaryKind::Maximum | BinaryKind::Minimum)
    }
}

impl UnaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            UnaryKind::Affine { .. } => "affine",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Silu => "silu",
            UnaryKind::Atan => "atan",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
            UnaryKind::Clamp { .. } => "clamp",
        }
    }

    pub(crate) fn flops_per_element(self) -> u64 {
        match self {
            UnaryKind::Relu | UnaryKind::Clamp { .. } => 0,
            UnaryKind::Affine { .. } => 2,
            // sigmoid plus the multiply
            UnaryKind::Silu => 2,
            _ => 1,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Affine { scale, shift } => scale * x + shift,
            UnaryKind::Exp => math::exp(x),
            UnaryKind::Log => math::ln(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Sigmoid => math::sigmoid(x),
            UnaryKind::Silu => x * math::sigmoid(x),
            UnaryKind::Atan => math::atan(x),
            UnaryKind::Sqrt => math::sqrt(x),
            UnaryKind::Square => x * x,
            UnaryKind::Clamp { lo, hi } => x.clamp(lo, hi),
        }
    }

    /// d(out)/d(x) given the input and the already computed output.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Affine { scale, .. } => scale,
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Silu => {
                let s = math::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryKind::Atan => 1.0 / (1.0 + x * x),
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Clamp { lo, hi } => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn unary_forward(kind: UnaryKind, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

pub(crate) fn unary_backward(kind: UnaryKind, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Same-rank broadcasting: every extent pair must be equal or contain a 1.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, alloc::format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, alloc::format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Row-major strides of `shape` laid against `out`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == out[i] { acc } else { 0 };
        acc *= shape[i];
    }
    strides
}

/// Visits every output position together with the matching offsets into `a` and `b`.
fn for_each_broadcast(
    a_shape: &[usize],
    b_shape: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a_shape, out);
    let sb = broadcast_strides(b_shape, out);
    let rank = out.len();
    let n: usize = out.iter().product();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // advance the multi-index over all but the last axis
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            oa -= sa[axis] * idx[axis];
            ob -= sb[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn binary_forward(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| kind.apply(x, y)).collect(),
        ));
    }
    let out = broadcast_shape(kind.name(), a.shape(), b.shape())?;
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), b.shape(), &out, |o, i, j| data[o] = kind.apply(ad[i], bd[j]));
    Ok(Tensor::from_parts(out, data))
}

/// Partial derivatives of the binary op at (x, y), keyed by operand.
fn binary_partials(kind: BinaryKind, x: f64, y: f64) -> (f64, f64) {
    match kind {
        BinaryKind::Add => (1.0, 1.0),
        BinaryKind::Sub => (1.0, -1.0),
        BinaryKind::Mul => (y, x),
        BinaryKind::Div => (1.0 / y, -x / (y * y)),
        BinaryKind::Maximum => {
            if x >= y {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
        BinaryKind::Minimum => {
            if x <= y {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

pub(crate) fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor) {
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    if a.shape() == b.shape() {
        for o in 0..gd.len() {
            let (pa, pb) = binary_partials(kind, ad[o], bd[o]);
            ga[o] = gd[o] * pa;
            gb[o] = gd[o] * pb;
        }
    } else {
        for_each_broadcast(a.shape(), b.shape(), g.shape(), |o, i, j| {
            let (pa, pb) = binary_partials(kind, ad[i], bd[j]);
            ga[i] += gd[o] * pa;
            gb[j] += gd[o] * pb;
        });
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

pub(crate) fn bce_with_logits_forward(x: &Tensor, t: &Tensor) -> Result<Tensor> {
    x.zip_map(t, |z, y| math::softplus(z) - y * z)
}

pub(crate) fn bce_with_logits_backward(x: &Tensor, t: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(t.data())
        .zip(g.data())
        .map(|((&z, &y), &gv)| gv * (math::sigmoid(z) - y))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}
