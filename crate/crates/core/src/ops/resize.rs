use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::math;
use crate::tensor::Tensor;

/// One output coordinate's two source taps and the weight of the upper tap.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre source mapping `src = (dst + 0.5) * in/out - 0.5`,
/// clamped to `[0, in - 1]`.
pub(crate) fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = math::floor(src) as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

pub(crate) fn bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err("bilinear_resize", "target extents must be >= 1"));
    }
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut out = vec![0.0; n * c * out_h * out_w];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        for (oy, a) in ty.iter().enumerate() {
            let (r0, r1) = (&plane[a.lo * w..(a.lo + 1) * w], &plane[a.hi * w..(a.hi + 1) * w]);
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.lo] + (r0[b.hi] - r0[b.lo]) * b.frac;
                let bot = r1[b.lo] + (r1[b.hi] - r1[b.lo]) * b.frac;
                dst[oy * out_w + ox] = top + (bot - top) * a.frac;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

pub(crate) fn bilinear_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4("bilinear_resize")?;
    let (_, _, out_h, out_w) = g.dims4("bilinear_resize")?;
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut dx = vec![0.0; x.numel()];
    for (dst, src) in dx.chunks_mut(h * w).zip(g.data().chunks(out_h * out_w)) {
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let gv = src[oy * out_w + ox];
                let (wy1, wx1) = (a.frac, b.frac);
                let (wy0, wx0) = (1.0 - wy1, 1.0 - wx1);
                dst[a.lo * w + b.lo] += gv * wy0 * wx0;
                dst[a.lo * w + b.hi] += gv * wy0 * wx1;
                dst[a.hi * w + b.lo] += gv * wy1 * wx0;
                dst[a.hi * w + b.hi] += gv * wy1 * wx1;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}
