//! The primitive operation set and its forward, backward and FLOP rules.
//!
//! FLOP convention: a multiply-accumulate counts 2, every elementwise
//! arithmetic result or transcendental (exp, log, sigmoid, atan, sqrt) counts
//! 1, comparisons (relu, max, clamp) and pure data movement (reshape,
//! transpose, concat, slice) count 0.

pub mod conv;
pub mod deform;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod pool;
pub mod reduce;
pub mod resize;

use alloc::vec;
use alloc::vec::Vec;

pub use conv::ConvSpec;
pub use elementwise::{BinaryKind, UnaryKind};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// Forward identity that blocks gradients.
    Detach,
    Binary(BinaryKind),
    Unary(UnaryKind),
    Sum,
    Mean,
    SumAxis(usize),
    MaxAxis(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Reshape(Vec<usize>),
    TransposeLast,
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    /// Rows along axis 0.
    IndexSelect(Vec<usize>),
    Matmul,
    Conv2d { spec: ConvSpec, bias: bool },
    DeformConv2d { spec: ConvSpec, bias: bool },
    MaxPool2d(ConvSpec),
    GlobalAvgPool,
    Bilinear { out_h: usize, out_w: usize },
    /// Inputs `(x, gamma, beta)`, batch statistics.
    BatchNorm { eps: f64 },
    /// Inputs `(x, gamma, beta, running_mean, running_var)`.
    BatchNormEval { eps: f64 },
    /// Elementwise `softplus(z) - t*z`; inputs `(logits, targets)`.
    BceWithLogits,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach => "detach",
            Op::Binary(k) => k.name(),
            Op::Unary(k) => k.name(),
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::MaxAxis(_) => "max_axis",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Reshape(_) => "reshape",
            Op::TransposeLast => "transpose",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::IndexSelect(_) => "index_select",
            Op::Matmul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::DeformConv2d { .. } => "deform_conv2d",
            Op::MaxPool2d(_) => "max_pool",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Bilinear { .. } => "bilinear_resize",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm",
            Op::BceWithLogits => "bce_with_logits",
        }
    }

    fn arity(&self) -> core::ops::RangeInclusive<usize> {
        match self {
            Op::Leaf => 0..=0,
            Op::Binary(_) | Op::Matmul | Op::BceWithLogits => 2..=2,
            Op::Concat(_) => 1..=usize::MAX,
            Op::Conv2d { bias, .. } => {
                let n = 2 + *bias as usize;
                n..=n
            }
            Op::DeformConv2d { bias, .. } => {
                let n = 3 + *bias as usize;
                n..=n
            }
            Op::BatchNorm { .. } => 3..=3,
            Op::BatchNormEval { .. } => 5..=5,
            _ => 1..=1,
        }
    }

    pub(crate) fn forward(&self, xs: &[&Tensor]) -> Result<Tensor> {
        if !self.arity().contains(&xs.len()) {
            return Err(shape_err(self.name(), alloc::format!("wrong number of inputs: {}", xs.len())));
        }
        match self {
            Op::Leaf => Err(shape_err("leaf", "leaves carry their own value")),
            Op::Detach => Ok(xs[0].clone()),
            Op::Binary(k) => elementwise::binary_forward(*k, xs[0], xs[1]),
            Op::Unary(k) => Ok(elementwise::unary_forward(*k, xs[0])),
            Op::Sum => Ok(Tensor::scalar(xs[0].sum())),
            Op::Mean => Ok(Tensor::scalar(xs[0].sum() / xs[0].numel() as f64)),
            Op::SumAxis(a) => reduce::sum_axis_forward(xs[0], *a),
            Op::MaxAxis(a) => reduce::max_axis_forward(xs[0], *a),
            Op::Softmax(a) => reduce::softmax_forward(xs[0], *a, false),
            Op::LogSoftmax(a) => reduce::softmax_forward(xs[0], *a, true),
            Op::Reshape(s) => xs[0].reshape(s),
            Op::TransposeLast => xs[0].transpose_last(),
            Op::Concat(a) => Tensor::concat(xs, *a),
            Op::Slice { axis, start, len } => xs[0].slice(*axis, *start, *len),
            Op::IndexSelect(idx) => index_select_forward(xs[0], idx),
            Op::Matmul => linalg::matmul_forward(xs[0], xs[1]),
            Op::Conv2d { spec, bias } => conv::conv2d_forward(xs[0], xs[1], bias.then(|| xs[2]), spec),
            Op::DeformConv2d { spec, bias } => {
                deform::deform_conv_forward(xs[0], xs[1], xs[2], bias.then(|| xs[3]), spec)
            }
            Op::MaxPool2d(spec) => pool::max_pool_forward(xs[0], spec),
            Op::GlobalAvgPool => pool::gap_forward(xs[0]),
            Op::Bilinear { out_h, out_w } => resize::bilinear_forward(xs[0], *out_h, *out_w),
            Op::BatchNorm { eps } => norm::bn_train_forward(xs[0], xs[1], xs[2], *eps),
            Op::BatchNormEval { eps } => norm::bn_eval_forward(xs[0], xs[1], xs[2], xs[3], xs[4], *eps),
            Op::BceWithLogits => elementwise::bce_with_logits_forward(xs[0], xs[1]),
        }
    }

    /// Vector-Jacobian products for each input; `need[i]` is false for inputs
    /// that do not require a gradient, which may be skipped.
    pub(crate) fn backward(&self, xs: &[&Tensor], out: &Tensor, g: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let one = |t: Tensor| Ok(vec![Some(t)]);
        match self {
            Op::Leaf | Op::Detach => Ok(vec![None; xs.len()]),
            Op::Binary(k) => {
                let (ga, gb) = elementwise::binary_backward(*k, xs[0], xs[1], g);
                Ok(vec![Some(ga), Some(gb)])
            }
            Op::Unary(k) => one(elementwise::unary_backward(*k, xs[0], out, g)),
            Op::Sum => one(Tensor::full(xs[0].shape(), g.item())),
            Op::Mean => one(Tensor::full(xs[0].shape(), g.item() / xs[0].numel() as f64)),
            Op::SumAxis(a) => one(reduce::sum_axis_backward(xs[0], *a, g)?),
            Op::MaxAxis(a) => one(reduce::max_axis_backward(xs[0], *a, g)?),
            Op::Softmax(a) => one(reduce::softmax_backward(out, *a, g, false)?),
            Op::LogSoftmax(a) => one(reduce::softmax_backward(out, *a, g, true)?),
            Op::Reshape(_) => one(g.reshape(xs[0].shape())?),
            Op::TransposeLast => one(g.transpose_last()?),
            Op::Concat(a) => {
                let mut start = 0;
                let mut grads = Vec::with_capacity(xs.len());
                for x in xs {
                    let len = x.shape()[*a];
                    grads.push(Some(g.slice(*a, start, len)?));
                    start += len;
                }
                Ok(grads)
            }
            Op::Slice { axis, start, len } => one(slice_backward(xs[0], *axis, *start, *len, g)?),
            Op::IndexSelect(idx) => one(index_select_backward(xs[0], idx, g)),
            Op::Matmul => {
                let (ga, gb) = linalg::matmul_backward(xs[0], xs[1], g)?;
                Ok(vec![Some(ga), Some(gb)])
            }
            Op::Conv2d { spec, bias } => {
                let (dx, dw, db) = conv::conv2d_backward(xs[0], xs[1], *bias, spec, g, need[0])?;
                let mut v = vec![dx, Some(dw)];
                if *bias {
                    v.push(db);
                }
                Ok(v)
            }
            Op::DeformConv2d { spec, bias } => {
                let d = deform::deform_conv_backward(xs[0], xs[1], xs[2], *bias, spec, g)?;
                let mut v = vec![Some(d.dx), Some(d.doff), Some(d.dw)];
                if *bias {
                    v.push(d.db);
                }
                Ok(v)
            }
            Op::MaxPool2d(spec) => one(pool::max_pool_backward(xs[0], spec, g)?),
            Op::GlobalAvgPool => one(pool::gap_backward(xs[0], g)?),
            Op::Bilinear { .. } => one(resize::bilinear_backward(xs[0], g)?),
            Op::BatchNorm { eps } => {
                let (dx, dg, db) = norm::bn_backward(xs[0], xs[1], None, *eps, g)?;
                Ok(vec![Some(dx), Some(dg), Some(db)])
            }
            Op::BatchNormEval { eps } => {
                let (dx, dg, db) = norm::bn_backward(xs[0], xs[1], Some((xs[3], xs[4])), *eps, g)?;
                let (dm, dv) = if need[3] || need[4] {
                    let (m, v) = norm::bn_eval_stat_grads(xs[1], xs[4], &dg, &db, *eps);
                    (Some(m), Some(v))
                } else {
                    (None, None)
                };
                Ok(vec![Some(dx), Some(dg), Some(db), dm, dv])
            }
            Op::BceWithLogits => Ok(vec![Some(elementwise::bce_with_logits_backward(xs[0], xs[1], g)), None]),
        }
    }

    pub(crate) fn flops(&self, xs: &[&[usize]], out: &[usize]) -> u64 {
        let n_out = tensor_numel(out);
        let n_in = xs.first().map_or(0, |s| tensor_numel(s));
        match self {
            Op::Leaf | Op::Detach | Op::Reshape(_) | Op::TransposeLast | Op::Concat(_) => 0,
            Op::Slice { .. } | Op::IndexSelect(_) | Op::MaxAxis(_) | Op::MaxPool2d(_) => 0,
            Op::Binary(k) => {
                if k.counts_flops() {
                    n_out
                } else {
                    0
                }
            }
            Op::Unary(k) => k.flops_per_element() * n_out,
            Op::Sum | Op::Mean | Op::SumAxis(_) | Op::GlobalAvgPool => n_in,
            // exp, sum, divide (or subtract) per element
            Op::Softmax(_) | Op::LogSoftmax(_) => 3 * n_in,
            Op::Matmul => linalg::matmul_flops(xs[0], xs[1]),
            Op::Conv2d { spec, .. } => conv::conv2d_flops(xs[0], xs[1], spec),
            Op::DeformConv2d { spec, .. } => {
                // the GEMM plus four weighted corner reads per sampled value
                let c = xs[0].get(1).copied().unwrap_or(0) as u64;
                let taps = (spec.kernel_h * spec.kernel_w) as u64;
                let (n, hw) = (out[0] as u64, (out[2] * out[3]) as u64);
                conv::conv2d_flops(&[xs[0][0], xs[0][1], xs[0][2], xs[0][3]], xs[2], spec) + 8 * n * c * taps * hw
            }
            // bilinear: 3 lerps of 2 flops each
            Op::Bilinear { .. } => 6 * n_out,
            Op::BatchNorm { .. } => 6 * n_in,
            Op::BatchNormEval { .. } => 4 * n_in,
            Op::BceWithLogits => 4 * n_in,
        }
    }
}

fn tensor_numel(s: &[usize]) -> u64 {
    s.iter().product::<usize>() as u64
}

fn slice_backward(x: &Tensor, axis: usize, start: usize, len: usize, g: &Tensor) -> Result<Tensor> {
    let (outer, ext, inner) = reduce::split_axis("slice", x.shape(), axis)?;
    let mut dx = vec![0.0; x.numel()];
    for o in 0..outer {
        let dst = (o * ext + start) * inner;
        dx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

fn index_select_forward(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if idx.is_empty() {
        return Err(shape_err("index_select", "empty index list"));
    }
    let rows = x.shape()[0];
    let row = x.numel() / rows;
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= rows {
            return Err(shape_err("index_select", alloc::format!("row {i} out of range {rows}")));
        }
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::from_parts(shape, data))
}

fn index_select_backward(x: &Tensor, idx: &[usize], g: &Tensor) -> Tensor {
    let row = x.numel() / x.shape()[0];
    let mut dx = vec![0.0; x.numel()];
    for (k, &i) in idx.iter().enumerate() {
        for (d, s) in dx[i * row..(i + 1) * row].iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
            *d += s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), dx)
}
