//! Deformable convolution: every kernel tap samples the input at its regular
//! grid position plus a learned fractional offset.
//!
//! Offsets are laid out `[N, 2*kh*kw, H', W']` with channel `2t` holding the
//! vertical and `2t + 1` the horizontal displacement (input pixels) of tap
//! `t = i*kw + j`. Sampling is bilinear; corners outside the image read as
//! zero, so zero offsets reproduce a zero-padded [`conv2d`](super::conv).

use alloc::vec;
use alloc::vec::Vec;

use super::conv::{conv_geom, ConvGeom, ConvSpec};
use super::linalg::gemm;
use crate::error::{shape_err, Result};
use crate::math;
use crate::tensor::Tensor;

/// Four bilinear corners of one sample point; `None` marks an out-of-image corner.
#[derive(Clone, Copy)]
struct Sample {
    idx: [Option<usize>; 4],
    wt: [f64; 4],
    ly: f64,
    lx: f64,
}

fn sample_point(py: f64, px: f64, h: usize, w: usize) -> Sample {
    let y0 = math::floor(py);
    let x0 = math::floor(px);
    let (ly, lx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |y: isize, x: isize| {
        (y >= 0 && y < h as isize && x >= 0 && x < w as isize).then(|| y as usize * w + x as usize)
    };
    Sample {
        idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        wt: [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx],
        ly,
        lx,
    }
}

fn check(x: &Tensor, off: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<ConvGeom> {
    if spec.groups != 1 {
        return Err(shape_err("deform_conv", "grouped deformable convolution is not supported"));
    }
    let gm = conv_geom(x.shape(), w.shape(), b.map(|t| t.shape()), spec)?;
    let taps = spec.kernel_h * spec.kernel_w;
    let want = [gm.n, 2 * taps, gm.ho, gm.wo];
    if off.shape() != want {
        return Err(shape_err(
            "deform_conv",
            alloc::format!("offsets must be {want:?} for this kernel, got {:?}", off.shape()),
        ));
    }
    Ok(gm)
}

/// Sample points for image `n`, indexed `[tap * H'W' + q]`.
fn samples(off: &[f64], gm: &ConvGeom, spec: &ConvSpec) -> Vec<Sample> {
    let hw = gm.ho * gm.wo;
    let taps = spec.kernel_h * spec.kernel_w;
    let mut out = Vec::with_capacity(taps * hw);
    for t in 0..taps {
        let (i, j) = (t / spec.kernel_w, t % spec.kernel_w);
        let (oy_ch, ox_ch) = (&off[2 * t * hw..(2 * t + 1) * hw], &off[(2 * t + 1) * hw..(2 * t + 2) * hw]);
        for q in 0..hw {
            let (oy, ox) = (q / gm.wo, q % gm.wo);
            let py = (oy * spec.stride + i * spec.dilation) as f64 - spec.padding as f64 + oy_ch[q];
            let px = (ox * spec.stride + j * spec.dilation) as f64 - spec.padding as f64 + ox_ch[q];
            out.push(sample_point(py, px, gm.h, gm.w));
        }
    }
    out
}

fn fill_columns(img: &[f64], pts: &[Sample], gm: &ConvGeom, taps: usize, col: &mut [f64]) {
    let hw = gm.ho * gm.wo;
    for c in 0..gm.c {
        let plane = &img[c * gm.h * gm.w..(c + 1) * gm.h * gm.w];
        let rows = &mut col[c * taps * hw..(c + 1) * taps * hw];
        for (dst, s) in rows.iter_mut().zip(pts) {
            let mut v = 0.0;
            for k in 0..4 {
                if let Some(i) = s.idx[k] {
                    v += s.wt[k] * plane[i];
                }
            }
            *dst = v;
        }
    }
}

pub(crate) fn deform_conv_forward(
    x: &Tensor,
    off: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let gm = check(x, off, w, b, spec)?;
    let taps = spec.kernel_h * spec.kernel_w;
    let hw = gm.ho * gm.wo;
    let r = gm.c * taps;
    let mut col = vec![0.0; r * hw];
    let mut out = vec![0.0; gm.n * gm.k * hw];
    for n in 0..gm.n {
        let pts = samples(&off.data()[n * 2 * taps * hw..(n + 1) * 2 * taps * hw], &gm, spec);
        let img = &x.data()[n * gm.c * gm.h * gm.w..(n + 1) * gm.c * gm.h * gm.w];
        fill_columns(img, &pts, &gm, taps, &mut col);
        let o = &mut out[n * gm.k * hw..(n + 1) * gm.k * hw];
        gemm(gm.k, r, hw, w.data(), false, &col, false, o, false);
        if let Some(b) = b {
            for k in 0..gm.k {
                for v in &mut o[k * hw..(k + 1) * hw] {
                    *v += b.data()[k];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![gm.n, gm.k, gm.ho, gm.wo], out))
}

pub(crate) struct DeformGrads {
    pub dx: Tensor,
    pub doff: Tensor,
    pub dw: Tensor,
    pub db: Option<Tensor>,
}

pub(crate) fn deform_conv_backward(
    x: &Tensor,
    off: &Tensor,
    w: &Tensor,
    has_bias: bool,
    spec: &ConvSpec,
    g: &Tensor,
) -> Result<DeformGrads> {
    let gm = check(x, off, w, None, spec)?;
    let taps = spec.kernel_h * spec.kernel_w;
    let hw = gm.ho * gm.wo;
    let r = gm.c * taps;
    let mut col = vec![0.0; r * hw];
    let mut dcol = vec![0.0; r * hw];
    let mut dx = vec![0.0; x.numel()];
    let mut doff = vec![0.0; off.numel()];
    let mut dw = vec![0.0; w.numel()];
    for n in 0..gm.n {
        let pts = samples(&off.data()[n * 2 * taps * hw..(n + 1) * 2 * taps * hw], &gm, spec);
        let img = &x.data()[n * gm.c * gm.h * gm.w..(n + 1) * gm.c * gm.h * gm.w];
        let gy = &g.data()[n * gm.k * hw..(n + 1) * gm.k * hw];
        fill_columns(img, &pts, &gm, taps, &mut col);
        gemm(gm.k, hw, r, gy, false, &col, true, &mut dw, true);
        gemm(r, gm.k, hw, w.data(), true, gy, false, &mut dcol, false);

        let dimg = &mut dx[n * gm.c * gm.h * gm.w..(n + 1) * gm.c * gm.h * gm.w];
        let doff_n = &mut doff[n * 2 * taps * hw..(n + 1) * 2 * taps * hw];
        for c in 0..gm.c {
            let plane = &img[c * gm.h * gm.w..(c + 1) * gm.h * gm.w];
            let dplane = &mut dimg[c * gm.h * gm.w..(c + 1) * gm.h * gm.w];
            for (tq, s) in pts.iter().enumerate() {
                let gv = dcol[c * taps * hw + tq];
                if gv == 0.0 {
                    continue;
                }
                let v: [f64; 4] = core::array::from_fn(|k| s.idx[k].map_or(0.0, |i| plane[i]));
                for k in 0..4 {
                    if let Some(i) = s.idx[k] {
                        dplane[i] += gv * s.wt[k];
                    }
                }
                let dpy = (1.0 - s.lx) * (v[2] - v[0]) + s.lx * (v[3] - v[1]);
                let dpx = (1.0 - s.ly) * (v[1] - v[0]) + s.ly * (v[3] - v[2]);
                let (t, q) = (tq / hw, tq % hw);
                doff_n[2 * t * hw + q] += gv * dpy;
                doff_n[(2 * t + 1) * hw + q] += gv * dpx;
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = vec![0.0; gm.k];
        for n in 0..gm.n {
            for (k, acc) in db.iter_mut().enumerate() {
                *acc += g.data()[(n * gm.k + k) * hw..(n * gm.k + k + 1) * hw].iter().sum::<f64>();
            }
        }
        Tensor::from_parts(vec![gm.k], db)
    });
    Ok(DeformGrads {
        dx: Tensor::from_parts(x.shape().to_vec(), dx),
        doff: Tensor::from_parts(off.shape().to_vec(), doff),
        dw: Tensor::from_parts(w.shape().to_vec(), dw),
        db,
    })
}
