//! Anchor-free decoupled heads and box decoding.

use alloc::vec::Vec;

use crate::boxes::DetectionBox;
use crate::config::HeadConfig;
use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::math;
use crate::nn::{Act, Builder, Conv2d, ConvBnAct, Ctx};
use crate::ops::ConvSpec;
use crate::tensor::Tensor;

/// Initial foreground probability encoded in the classification bias.
pub const CLS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Branch {
    pub convs: [ConvBnAct; 2],
    pub out: Conv2d,
}

impl Branch {
    fn new(b: &mut Builder<'_>, in_ch: usize, width: usize, out_ch: usize, bias_init: f64) -> Self {
        let convs = [
            ConvBnAct::new(&mut b.sub("0"), in_ch, width, ConvSpec::same(3), Act::Silu),
            ConvBnAct::new(&mut b.sub("1"), width, width, ConvSpec::same(3), Act::Silu),
        ];
        let mut out = Conv2d::new(&mut b.sub("out"), width, out_ch, ConvSpec::new(1), false);
        out.bias = Some(b.sub("out").param("bias", Tensor::full(&[out_ch], bias_init)));
        Self { convs, out }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.convs[0].forward(ctx, x)?;
        let y = self.convs[1].forward(ctx, y)?;
        self.out.forward(ctx, y)
    }
}

/// Classification and box-distribution branches for one pyramid level.
#[derive(Clone, Debug)]
pub struct DecoupledHead {
    pub cls: Branch,
    pub reg: Branch,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadLevel {
    /// `[N, num_classes, H, W]` logits.
    pub cls: Var,
    /// `[N, 4 (reg_max + 1), H, W]` side-distribution logits, sides ordered left, top, right, bottom.
    pub reg: Var,
}

impl DecoupledHead {
    pub fn new(b: &mut Builder<'_>, in_ch: usize, cfg: &HeadConfig) -> Self {
        let prior = -math::ln((1.0 - CLS_PRIOR) / CLS_PRIOR);
        Self {
            cls: Branch::new(&mut b.sub("cls"), in_ch, cfg.width, cfg.num_classes, prior),
            reg: Branch::new(&mut b.sub("reg"), in_ch, cfg.width, 4 * (cfg.reg_max + 1), 1.0),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<HeadLevel> {
        Ok(HeadLevel { cls: self.cls.forward(ctx, x)?, reg: self.reg.forward(ctx, x)? })
    }
}

/// Expected bin index `sum_i i softmax(logits)_i`.
pub fn expected_bin(logits: &[f64]) -> f64 {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut acc) = (0.0, 0.0);
    for (i, &l) in logits.iter().enumerate() {
        let e = math::exp(l - mx);
        z += e;
        acc += i as f64 * e;
    }
    acc / z
}

/// Candidate boxes of image `n` from one level's raw outputs: the best class
/// per cell with its sigmoid score, side lengths from the distribution
/// expectations times `stride` around the cell centre.
pub fn decode_level(cls: &Tensor, reg: &Tensor, n: usize, stride: usize, image_size: usize) -> Result<Vec<DetectionBox>> {
    let (nb, nc, h, w) = cls.dims4("decode")?;
    let (nr, rc, rh, rw) = reg.dims4("decode")?;
    if nb != nr || h != rh || w != rw || rc % 4 != 0 || n >= nb {
        return Err(shape_err("decode", alloc::format!("cls {:?} and reg {:?} disagree", cls.shape(), reg.shape())));
    }
    let bins = rc / 4;
    let hw = h * w;
    let (s, size) = (stride as f64, image_size as f64);
    let mut out = Vec::with_capacity(hw);
    let mut buf = alloc::vec![0.0; bins];
    for y in 0..h {
        for x in 0..w {
            let cell = y * w + x;
            let (mut best, mut best_c) = (f64::NEG_INFINITY, 0);
            for c in 0..nc {
                let v = cls.data()[(n * nc + c) * hw + cell];
                if v > best {
                    best = v;
                    best_c = c;
                }
            }
            let mut sides = [0.0; 4];
            for (k, side) in sides.iter_mut().enumerate() {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = reg.data()[(n * rc + k * bins + i) * hw + cell];
                }
                *side = expected_bin(&buf) * s;
            }
            let (ax, ay) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            let corners = [(ax - sides[0]) / size, (ay - sides[1]) / size, (ax + sides[2]) / size, (ay + sides[3]) / size];
            out.push(DetectionBox::from_corners(best_c, math::sigmoid(best), corners));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn one_level(reg_vals: impl Fn(usize, usize) -> f64) -> (Tensor, Tensor) {
        let cls = Tensor::zeros(&[1, 2, 1, 1]);
        let reg = Tensor::from_fn(&[1, 68, 1, 1], |i| reg_vals(i / 17, i % 17));
        (cls, reg)
    }

    #[test]
    fn point_mass_decodes_to_bin_times_stride() {
        let (cls, reg) = one_level(|_, i| if i == 5 { 80.0 } else { -80.0 });
        let b = decode_level(&cls, &reg, 0, 16, 640).unwrap();
        assert!((b[0].w - 2.0 * 5.0 * 16.0 / 640.0).abs() < 1e-12);
        assert!((b[0].cx - 8.0 / 640.0).abs() < 1e-12);
        assert_eq!(b[0].score, 0.5);
    }

    #[test]
    fn uniform_decodes_to_middle_bin() {
        let (cls, reg) = one_level(|_, _| 0.3);
        let b = decode_level(&cls, &reg, 0, 32, 640).unwrap();
        assert!((b[0].h - 2.0 * 8.0 * 32.0 / 640.0).abs() < 1e-12);
    }

    #[test]
    fn expectation_matches_explicit_sum() {
        let mut rng = seeded(3);
        for _ in 0..50 {
            let l = Tensor::randn(&[17], &mut rng).scale(3.0);
            let z: f64 = l.data().iter().map(|v| math::exp(*v)).sum();
            let direct: f64 = l.data().iter().enumerate().map(|(i, v)| i as f64 * math::exp(*v) / z).sum();
            assert!((expected_bin(l.data()) - direct).abs() < 1e-10);
        }
    }
}
