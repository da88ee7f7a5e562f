use alloc::vec;

use crate::error::{shape_err, Result};
use crate::math;
use crate::tensor::Tensor;

/// `(outer, extent, inner)` view of `shape` around `axis`.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(op, alloc::format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn keepdim_shape(shape: &[usize], axis: usize) -> alloc::vec::Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

pub(crate) fn sum_axis_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, ext, inner) = split_axis("sum_axis", x.shape(), axis)?;
    let mut out = vec![0.0; outer * inner];
    let d = x.data();
    for o in 0..outer {
        for e in 0..ext {
            let row = &d[(o * ext + e) * inner..(o * ext + e + 1) * inner];
            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    Ok(Tensor::from_parts(keepdim_shape(x.shape(), axis), out))
}

pub(crate) fn sum_axis_backward(x: &Tensor, axis: usize, g: &Tensor) -> Result<Tensor> {
    let (outer, ext, inner) = split_axis("sum_axis", x.shape(), axis)?;
    let mut out = vec![0.0; x.numel()];
    let gd = g.data();
    for o in 0..outer {
        for e in 0..ext {
            out[(o * ext + e) * inner..(o * ext + e + 1) * inner]
                .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Index (within the axis) of the first maximum for each `(outer, inner)` slot.
fn argmax_axis(x: &Tensor, axis: usize) -> Result<alloc::vec::Vec<usize>> {
    let (outer, ext, inner) = split_axis("max_axis", x.shape(), axis)?;
    let d = x.data();
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = f64::NEG_INFINITY;
            for e in 0..ext {
                let v = d[(o * ext + e) * inner + i];
                if v > best {
                    best = v;
                    arg[o * inner + i] = e;
                }
            }
        }
    }
    Ok(arg)
}

pub(crate) fn max_axis_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (_, ext, inner) = split_axis("max_axis", x.shape(), axis)?;
    let arg = argmax_axis(x, axis)?;
    let d = x.data();
    let out = arg
        .iter()
        .enumerate()
        .map(|(slot, &e)| d[((slot / inner) * ext + e) * inner + slot % inner])
        .collect();
    Ok(Tensor::from_parts(keepdim_shape(x.shape(), axis), out))
}

pub(crate) fn max_axis_backward(x: &Tensor, axis: usize, g: &Tensor) -> Result<Tensor> {
    let (_, ext, inner) = split_axis("max_axis", x.shape(), axis)?;
    let arg = argmax_axis(x, axis)?;
    let mut out = vec![0.0; x.numel()];
    for (slot, &e) in arg.iter().enumerate() {
        out[((slot / inner) * ext + e) * inner + slot % inner] = g.data()[slot];
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Max-subtracted softmax (or log-softmax) along `axis`.
pub(crate) fn softmax_forward(x: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let (outer, ext, inner) = split_axis("softmax", x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |e: usize| (o * ext + e) * inner + i;
            let mx = (0..ext).fold(f64::NEG_INFINITY, |m, e| m.max(d[at(e)]));
            let mut z = 0.0;
            for e in 0..ext {
                let v = math::exp(d[at(e)] - mx);
                out[at(e)] = v;
                z += v;
            }
            if log {
                let lz = math::ln(z);
                for e in 0..ext {
                    out[at(e)] = d[at(e)] - mx - lz;
                }
            } else {
                for e in 0..ext {
                    out[at(e)] /= z;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward(y: &Tensor, axis: usize, g: &Tensor, log: bool) -> Result<Tensor> {
    let (outer, ext, inner) = split_axis("softmax", y.shape(), axis)?;
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |e: usize| (o * ext + e) * inner + i;
            if log {
                // dx = g - softmax * sum(g)
                let gs: f64 = (0..ext).map(|e| gd[at(e)]).sum();
                for e in 0..ext {
                    out[at(e)] = gd[at(e)] - math::exp(yd[at(e)]) * gs;
                }
            } else {
                // dx = y * (g - <g, y>)
                let dot: f64 = (0..ext).map(|e| gd[at(e)] * yd[at(e)]).sum();
                for e in 0..ext {
                    out[at(e)] = yd[at(e)] * (gd[at(e)] - dot);
                }
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}
