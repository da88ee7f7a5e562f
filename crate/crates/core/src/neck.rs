//! Pyramid neck with deformable alignment between adjacent levels.

use alloc::vec::Vec;

use crate::backbone::FeaturePyramid;
use crate::config::{AlignInput, NeckConfig, NeckMode};
use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::nn::{Act, Builder, Conv2d, ConvBnAct, Ctx, ParamId};
use crate::ops::ConvSpec;
use crate::tensor::Tensor;

/// Parallel depthwise convolutions with different receptive fields,
/// concatenated and fused back to the input width.
#[derive(Clone, Debug)]
pub struct Mrfp {
    pub paths: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl Mrfp {
    pub fn new(b: &mut Builder<'_>, ch: usize, kernels: &[usize]) -> Self {
        let paths = kernels
            .iter()
            .map(|&k| Conv2d::new(&mut b.sub(&alloc::format!("dw{k}")), ch, ch, ConvSpec::same(k).groups(ch), true))
            .collect();
        let fuse = Conv2d::new(&mut b.sub("fuse"), kernels.len() * ch, ch, ConvSpec::new(1), true);
        Self { paths, fuse }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let outs = self.paths.iter().map(|p| p.forward(ctx, x)).collect::<Result<Vec<_>>>()?;
        let cat = ctx.graph.concat(&outs, 1)?;
        self.fuse.forward(ctx, cat)
    }
}

/// Channel gating from globally pooled statistics.
#[derive(Clone, Debug)]
pub struct Fsm {
    pub gate: Conv2d,
    pub residual: bool,
}

impl Fsm {
    pub fn new(b: &mut Builder<'_>, ch: usize, residual: bool) -> Self {
        Self { gate: Conv2d::new(&mut b.sub("gate"), ch, ch, ConvSpec::new(1), true), residual }
    }

    /// Channel weights in `(0, 1)`, shaped `[N, C, 1, 1]`.
    pub fn weights(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let pooled = ctx.graph.global_avg_pool(x)?;
        let logits = self.gate.forward(ctx, pooled)?;
        Ok(ctx.graph.sigmoid(logits))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = self.weights(ctx, x)?;
        let y = ctx.graph.mul(x, w)?;
        if self.residual {
            ctx.graph.add(y, x)
        } else {
            Ok(y)
        }
    }
}

/// 1x1 convolution predicting `(dy, dx)` per kernel tap, clamped to `±bound`.
#[derive(Clone, Debug)]
pub struct OffsetPredictor {
    pub conv: Conv2d,
    pub bound: f64,
}

impl OffsetPredictor {
    /// Weights start at zero so that alignment begins as a plain convolution.
    pub fn new(b: &mut Builder<'_>, in_ch: usize, kernel: usize, bound: f64) -> Self {
        let out = 2 * kernel * kernel;
        let weight = b.param("weight", Tensor::zeros(&[out, in_ch, 1, 1]));
        let bias = b.param("bias", Tensor::zeros(&[out]));
        Self { conv: Conv2d { weight, bias: Some(bias), spec: ConvSpec::new(1) }, bound }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, upper_ctx: Var, f_arm: Var) -> Result<Var> {
        let (a, b) = (ctx.graph.shape(upper_ctx), ctx.graph.shape(f_arm));
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
            return Err(shape_err("predict_offsets", alloc::format!("inputs {a:?} and {b:?} are not spatially aligned")));
        }
        let cat = ctx.graph.concat(&[upper_ctx, f_arm], 1)?;
        let raw = self.conv.forward(ctx, cat)?;
        Ok(ctx.graph.clamp(raw, -self.bound, self.bound))
    }
}

/// Deformable convolution whose sampling positions come from a separate
/// offset tensor.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl DeformConv {
    pub fn new(b: &mut Builder<'_>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: b.uniform_fan_in("weight", &[out_ch, in_ch, kernel, kernel], fan_in),
            bias: b.uniform_fan_in("bias", &[out_ch], fan_in),
            spec: ConvSpec::same(kernel),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, offsets: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.graph.deform_conv2d(x, offsets, w, Some(b), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
}

impl Bottleneck {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(ctx, x)?;
        let y = self.cv2.forward(ctx, y)?;
        ctx.graph.add(x, y)
    }
}

/// Split-transform-concatenate refinement: the input is projected, split in
/// halves, one half runs through `depth` residual bottlenecks whose every
/// output is kept, and everything is fused by a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct C2f {
    pub cv1: ConvBnAct,
    pub blocks: Vec<Bottleneck>,
    pub cv2: ConvBnAct,
    pub hidden: usize,
}

impl C2f {
    pub fn new(b: &mut Builder<'_>, ch: usize, depth: usize) -> Self {
        let hidden = ch / 2;
        let blocks = (0..depth)
            .map(|i| {
                let mut s = b.sub(&alloc::format!("m{i}"));
                Bottleneck {
                    cv1: ConvBnAct::new(&mut s.sub("cv1"), hidden, hidden, ConvSpec::same(3), Act::Silu),
                    cv2: ConvBnAct::new(&mut s.sub("cv2"), hidden, hidden, ConvSpec::same(3), Act::Silu),
                }
            })
            .collect();
        Self {
            cv1: ConvBnAct::new(&mut b.sub("cv1"), ch, 2 * hidden, ConvSpec::new(1), Act::Silu),
            cv2: ConvBnAct::new(&mut b.sub("cv2"), (2 + depth) * hidden, ch, ConvSpec::new(1), Act::Silu),
            blocks,
            hidden,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x)[1];
        if !c.is_multiple_of(2) || c / 2 != self.hidden {
            return Err(shape_err("c2f", alloc::format!("needs {} (even) channels, got {c}", 2 * self.hidden)));
        }
        let y = self.cv1.forward(ctx, x)?;
        let mut parts = alloc::vec![ctx.graph.slice(y, 1, 0, self.hidden)?, ctx.graph.slice(y, 1, self.hidden, self.hidden)?];
        for blk in &self.blocks {
            let last = *parts.last().unwrap();
            parts.push(blk.forward(ctx, last)?);
        }
        let cat = ctx.graph.concat(&parts, 1)?;
        self.cv2.forward(ctx, cat)
    }
}

/// Aligns an upper (finer) level onto the grid of the next coarser level.
#[derive(Clone, Debug)]
pub struct Dab {
    pub mrfp: Mrfp,
    pub down: ConvBnAct,
    pub fsm: Fsm,
    pub offsets: OffsetPredictor,
    pub dconv: DeformConv,
    pub align_input: AlignInput,
    pub c2f: C2f,
}

/// Intermediate tensors of one alignment block.
#[derive(Clone, Copy, Debug)]
pub struct DabTrace {
    pub context: Var,
    pub f_arm: Var,
    pub offsets: Var,
    pub f_align: Var,
    pub out: Var,
}

impl Dab {
    pub fn new(b: &mut Builder<'_>, cfg: &NeckConfig) -> Self {
        let w = cfg.width;
        let align_in = match cfg.align_input {
            AlignInput::Concat => 2 * w,
            AlignInput::Context => w,
        };
        Self {
            mrfp: Mrfp::new(&mut b.sub("mrfp"), w, &cfg.mrfp_kernels),
            down: ConvBnAct::new(&mut b.sub("down"), w, w, ConvSpec::same(3).stride(2), Act::Silu),
            fsm: Fsm::new(&mut b.sub("fsm"), w, cfg.fsm_residual),
            offsets: OffsetPredictor::new(&mut b.sub("offsets"), 2 * w, cfg.dconv_kernel, cfg.offset_bound),
            dconv: DeformConv::new(&mut b.sub("dconv"), align_in, w, cfg.dconv_kernel),
            align_input: cfg.align_input,
            c2f: C2f::new(&mut b.sub("c2f"), w, cfg.c2f_depth),
        }
    }

    pub fn trace(&self, ctx: &mut Ctx<'_>, upper: Var, lower: Var) -> Result<DabTrace> {
        let (u, l) = (ctx.graph.shape(upper).to_vec(), ctx.graph.shape(lower).to_vec());
        if u.len() != 4 || l.len() != 4 || u[2] != 2 * l[2] || u[3] != 2 * l[3] {
            return Err(shape_err("dab", alloc::format!("upper {u:?} must be twice the grid of lower {l:?}")));
        }
        let m = self.mrfp.forward(ctx, upper)?;
        let context = self.down.forward(ctx, m)?;
        let f_arm = self.fsm.forward(ctx, lower)?;
        let offsets = self.offsets.forward(ctx, context, f_arm)?;
        let src = match self.align_input {
            AlignInput::Concat => ctx.graph.concat(&[context, f_arm], 1)?,
            AlignInput::Context => context,
        };
        let f_align = self.dconv.forward(ctx, src, offsets)?;
        let sum = ctx.graph.add(f_align, f_arm)?;
        let out = self.c2f.forward(ctx, sum)?;
        Ok(DabTrace { context, f_arm, offsets, f_align, out })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, upper: Var, lower: Var) -> Result<Var> {
        Ok(self.trace(ctx, upper, lower)?.out)
    }
}

#[derive(Clone, Debug)]
pub enum BottomUp {
    Dab(Dab),
    /// 3x3 stride-2 downsample of the finer level added to the coarser one.
    Plain(ConvBnAct),
}

impl BottomUp {
    fn new(b: &mut Builder<'_>, cfg: &NeckConfig) -> Self {
        match cfg.mode {
            NeckMode::Dfpn => BottomUp::Dab(Dab::new(b, cfg)),
            NeckMode::Fpn => BottomUp::Plain(ConvBnAct::new(
                &mut b.sub("down"),
                cfg.width,
                cfg.width,
                ConvSpec::same(3).stride(2),
                Act::Silu,
            )),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, upper: Var, lower: Var) -> Result<Var> {
        match self {
            BottomUp::Dab(d) => d.forward(ctx, upper, lower),
            BottomUp::Plain(c) => {
                let y = c.forward(ctx, upper)?;
                ctx.graph.add(y, lower)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NeckOutput {
    /// Top-down intermediate at the middle level.
    pub f8: Var,
    pub f9: Var,
    pub f10: Var,
    pub f11: Var,
}

impl NeckOutput {
    pub fn levels(&self) -> [Var; 3] {
        [self.f9, self.f10, self.f11]
    }
}

#[derive(Clone, Debug)]
pub struct Neck {
    pub lat3: ConvBnAct,
    pub lat4: ConvBnAct,
    pub lat7: ConvBnAct,
    pub up10: BottomUp,
    pub up11: BottomUp,
}

impl Neck {
    pub fn new(b: &mut Builder<'_>, in_ch: [usize; 3], cfg: &NeckConfig) -> Self {
        let w = cfg.width;
        let lat = |b: &mut Builder<'_>, name: &str, c: usize| ConvBnAct::new(&mut b.sub(name), c, w, ConvSpec::new(1), Act::Silu);
        Self {
            lat3: lat(b, "lat3", in_ch[0]),
            lat4: lat(b, "lat4", in_ch[1]),
            lat7: lat(b, "lat7", in_ch[2]),
            up10: BottomUp::new(&mut b.sub("f10"), cfg),
            up11: BottomUp::new(&mut b.sub("f11"), cfg),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, p: &FeaturePyramid) -> Result<NeckOutput> {
        let l3 = self.lat3.forward(ctx, p.f3)?;
        let l4 = self.lat4.forward(ctx, p.f4)?;
        let l7 = self.lat7.forward(ctx, p.f7)?;
        let up = |ctx: &mut Ctx<'_>, x: Var, to: Var| -> Result<Var> {
            let s = ctx.graph.shape(to).to_vec();
            let xs = ctx.graph.shape(x);
            if xs[2] * 2 != s[2] || xs[3] * 2 != s[3] {
                return Err(shape_err("neck", alloc::format!("level {xs:?} is not half of {s:?}")));
            }
            ctx.graph.bilinear_resize(x, s[2], s[3])
        };
        let u7 = up(ctx, l7, l4)?;
        let f8 = ctx.graph.add(l4, u7)?;
        let u8 = up(ctx, f8, l3)?;
        let f9 = ctx.graph.add(l3, u8)?;
        let f10 = self.up10.forward(ctx, f9, f8)?;
        let f11 = self.up11.forward(ctx, f10, l7)?;
        Ok(NeckOutput { f8, f9, f10, f11 })
    }
}
