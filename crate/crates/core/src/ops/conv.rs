use alloc::vec;
use alloc::vec::Vec;

use super::linalg::gemm;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square `k x k` kernel, stride 1, no padding.
    pub fn new(k: usize) -> Self {
        Self { kernel_h: k, kernel_w: k, stride: 1, padding: 0, dilation: 1, groups: 1 }
    }

    /// Square kernel with `k / 2` padding, which keeps the extent at stride 1.
    pub fn same(k: usize) -> Self {
        Self::new(k).padding(k / 2)
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    fn out_extent(&self, op: &'static str, size: usize, k: usize) -> Result<usize> {
        let span = self.dilation * (k - 1) + 1;
        if size + 2 * self.padding < span {
            return Err(shape_err(
                op,
                alloc::format!("input extent {size} (+2x{} padding) smaller than window {span}", self.padding),
            ));
        }
        Ok((size + 2 * self.padding - span) / self.stride + 1)
    }

    /// Output `(H', W')` for an `H x W` input.
    pub fn output_hw(&self, op: &'static str, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(shape_err(op, alloc::format!("degenerate spec {self:?}")));
        }
        Ok((self.out_extent(op, h, self.kernel_h)?, self.out_extent(op, w, self.kernel_w)?))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub cg: usize,
    pub kg: usize,
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], bias: Option<&[usize]>, spec: &ConvSpec) -> Result<ConvGeom> {
    let op = "conv2d";
    let (n, c, h, wd) = match *x {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(shape_err(op, alloc::format!("input must be [N,C,H,W], got {x:?}"))),
    };
    let (k, cw, kh, kw) = match *w {
        [k, c, kh, kw] => (k, c, kh, kw),
        _ => return Err(shape_err(op, alloc::format!("weight must be [K,C/g,kh,kw], got {w:?}"))),
    };
    let g = spec.groups;
    if g == 0 || c % g != 0 || k % g != 0 {
        return Err(shape_err(op, alloc::format!("channels {c} -> {k} not divisible by groups {g}")));
    }
    if cw != c / g || kh != spec.kernel_h || kw != spec.kernel_w {
        return Err(shape_err(
            op,
            alloc::format!("weight {w:?} does not match input channels {c}/groups {g} and kernel {kh}x{kw} of {spec:?}"),
        ));
    }
    if let Some(b) = bias {
        if b != [k] {
            return Err(shape_err(op, alloc::format!("bias must be [{k}], got {b:?}")));
        }
    }
    let (ho, wo) = spec.output_hw(op, h, wd)?;
    Ok(ConvGeom { n, c, h, w: wd, k, ho, wo, cg: c / g, kg: k / g })
}

/// Unfolds channels `[c0, c0 + cg)` of one image into a `(cg*kh*kw) x (ho*wo)` matrix.
fn im2col(img: &[f64], gm: &ConvGeom, spec: &ConvSpec, c0: usize, col: &mut [f64]) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let hw = gm.ho * gm.wo;
    let p = spec.padding as isize;
    for c in 0..gm.cg {
        let plane = &img[(c0 + c) * gm.h * gm.w..(c0 + c + 1) * gm.h * gm.w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((c * kh + i) * kw + j) * hw..((c * kh + i) * kw + j + 1) * hw];
                for oy in 0..gm.ho {
                    let iy = (oy * spec.stride + i * spec.dilation) as isize - p;
                    let dst = &mut row[oy * gm.wo..(oy + 1) * gm.wo];
                    if iy < 0 || iy >= gm.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * gm.w..(iy as usize + 1) * gm.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + j * spec.dilation) as isize - p;
                        *d = if ix >= 0 && ix < gm.w as isize { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back into image channels.
fn col2im(col: &[f64], gm: &ConvGeom, spec: &ConvSpec, c0: usize, img: &mut [f64]) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let hw = gm.ho * gm.wo;
    let p = spec.padding as isize;
    for c in 0..gm.cg {
        let plane = &mut img[(c0 + c) * gm.h * gm.w..(c0 + c + 1) * gm.h * gm.w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((c * kh + i) * kw + j) * hw..((c * kh + i) * kw + j + 1) * hw];
                for oy in 0..gm.ho {
                    let iy = (oy * spec.stride + i * spec.dilation) as isize - p;
                    if iy < 0 || iy >= gm.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * gm.w..(iy as usize + 1) * gm.w];
                    for (ox, &v) in row[oy * gm.wo..(oy + 1) * gm.wo].iter().enumerate() {
                        let ix = (ox * spec.stride + j * spec.dilation) as isize - p;
                        if ix >= 0 && ix < gm.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let gm = conv_geom(x.shape(), w.shape(), b.map(|t| t.shape()), spec)?;
    let hw = gm.ho * gm.wo;
    let r = gm.cg * spec.kernel_h * spec.kernel_w;
    let mut out = vec![0.0; gm.n * gm.k * hw];
    let pointwise = spec.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; r * hw] };
    let xd = x.data();
    for n in 0..gm.n {
        let img = &xd[n * gm.c * gm.h * gm.w..(n + 1) * gm.c * gm.h * gm.w];
        for g in 0..spec.groups {
            let cols: &[f64] = if pointwise {
                &img[g * gm.cg * hw..(g + 1) * gm.cg * hw]
            } else {
                im2col(img, &gm, spec, g * gm.cg, &mut col);
                &col
            };
            let wg = &w.data()[g * gm.kg * r..(g + 1) * gm.kg * r];
            let o = &mut out[(n * gm.k + g * gm.kg) * hw..(n * gm.k + (g + 1) * gm.kg) * hw];
            gemm(gm.kg, r, hw, wg, false, cols, false, o, false);
        }
        if let Some(b) = b {
            for k in 0..gm.k {
                let bv = b.data()[k];
                for v in &mut out[(n * gm.k + k) * hw..(n * gm.k + k + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![gm.n, gm.k, gm.ho, gm.wo], out))
}

/// Gradients `(dx, dw, db)` of a convolution.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    spec: &ConvSpec,
    g: &Tensor,
    need_x: bool,
) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
    let bshape = [w.shape()[0]];
    let gm = conv_geom(x.shape(), w.shape(), has_bias.then_some(&bshape[..]), spec)?;
    let hw = gm.ho * gm.wo;
    let r = gm.cg * spec.kernel_h * spec.kernel_w;
    let pointwise = spec.is_pointwise();
    let mut dx = if need_x { vec![0.0; x.numel()] } else { Vec::new() };
    let mut dw = vec![0.0; w.numel()];
    let mut col = if pointwise { Vec::new() } else { vec![0.0; r * hw] };
    let mut dcol = if pointwise || !need_x { Vec::new() } else { vec![0.0; r * hw] };
    let (xd, gd) = (x.data(), g.data());
    for n in 0..gm.n {
        let img = &xd[n * gm.c * gm.h * gm.w..(n + 1) * gm.c * gm.h * gm.w];
        for grp in 0..spec.groups {
            let gy = &gd[(n * gm.k + grp * gm.kg) * hw..(n * gm.k + (grp + 1) * gm.kg) * hw];
            let wg = &w.data()[grp * gm.kg * r..(grp + 1) * gm.kg * r];
            let cols: &[f64] = if pointwise {
                &img[grp * gm.cg * hw..(grp + 1) * gm.cg * hw]
            } else {
                im2col(img, &gm, spec, grp * gm.cg, &mut col);
                &col
            };
            gemm(gm.kg, hw, r, gy, false, cols, true, &mut dw[grp * gm.kg * r..(grp + 1) * gm.kg * r], true);
            if need_x {
                let base = n * gm.c * gm.h * gm.w;
                if pointwise {
                    let dst = &mut dx[base + grp * gm.cg * hw..base + (grp + 1) * gm.cg * hw];
                    gemm(r, gm.kg, hw, wg, true, gy, false, dst, false);
                } else {
                    gemm(r, gm.kg, hw, wg, true, gy, false, &mut dcol, false);
                    col2im(&dcol, &gm, spec, grp * gm.cg, &mut dx[base..base + gm.c * gm.h * gm.w]);
                }
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = vec![0.0; gm.k];
        for n in 0..gm.n {
            for (k, acc) in db.iter_mut().enumerate() {
                *acc += gd[(n * gm.k + k) * hw..(n * gm.k + k + 1) * hw].iter().sum::<f64>();
            }
        }
        Tensor::from_parts(vec![gm.k], db)
    });
    Ok((
        need_x.then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
        Tensor::from_parts(w.shape().to_vec(), dw),
        db,
    ))
}

/// `2 * N * K * H' * W' * (C/g) * kh * kw`; bias adds are not counted.
pub(crate) fn conv2d_flops(x: &[usize], w: &[usize], spec: &ConvSpec) -> u64 {
    match conv_geom(x, w, None, spec) {
        Ok(g) => 2 * (g.n * g.k * g.ho * g.wo * g.cg * spec.kernel_h * spec.kernel_w) as u64,
        Err(_) => 0,
    }
}
