//! Hybrid transformer-convolution backbone: patch-embedding stem, dual-path
//! downsamplers, the stacked transformer-convolution module and SPPF.

use alloc::vec::Vec;

use crate::attention::{efficient_attention_graph, make_projection_with};
use crate::config::{AttentionConfig, BackboneConfig, BranchScheme, DownsampleMode, PatchMode};
use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::nn::{Act, Builder, Conv2d, ConvBnAct, Ctx, Mode, ParamId};
use crate::ops::ConvSpec;

/// Patch embedding. The stride-16 variants embed a coarse token grid and
/// resample it to half resolution so that every later stage keeps its shape.
#[derive(Clone, Debug)]
pub struct Stem {
    pub embed: ConvBnAct,
    pub mode: PatchMode,
}

impl Stem {
    pub fn new(b: &mut Builder<'_>, mode: PatchMode, stride: usize, in_ch: usize, out_ch: usize) -> Self {
        let (k, s, p) = mode.geometry();
        let s = match mode {
            PatchMode::Pte16 | PatchMode::Ope16 => s,
            _ => stride,
        };
        let spec = ConvSpec::new(k).stride(s).padding(p);
        Self { embed: ConvBnAct::new(&mut b.sub("embed"), in_ch, out_ch, spec, Act::Silu), mode }
    }

    /// Embedding output before any resampling.
    pub fn tokens(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        self.embed.forward(ctx, x)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (h, w) = {
            let s = ctx.graph.shape(x);
            (s[2], s[3])
        };
        let t = self.tokens(ctx, x)?;
        match self.mode {
            PatchMode::Pte16 | PatchMode::Ope16 => ctx.graph.bilinear_resize(t, h / 2, w / 2),
            _ => Ok(t),
        }
    }
}

/// Learned stride-2 convolution and bilinear half-resampling of the input,
/// concatenated and fused by a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct Rsfrs {
    pub conv: ConvBnAct,
    pub fuse: ConvBnAct,
}

impl Rsfrs {
    pub fn new(b: &mut Builder<'_>, in_ch: usize, out_ch: usize) -> Self {
        Self {
            conv: ConvBnAct::new(&mut b.sub("conv"), in_ch, out_ch, ConvSpec::same(3).stride(2), Act::Silu),
            fuse: ConvBnAct::new(&mut b.sub("fuse"), out_ch + in_ch, out_ch, ConvSpec::new(1), Act::Silu),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (h, w) = half_extent("rsfrs", ctx.graph.shape(x))?;
        let v2 = self.conv.forward(ctx, x)?;
        let v3 = ctx.graph.bilinear_resize(x, h, w)?;
        let cat = ctx.graph.concat(&[v2, v3], 1)?;
        self.fuse.forward(ctx, cat)
    }
}

fn half_extent(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 4 || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
        return Err(shape_err(op, alloc::format!("needs an NCHW input with even extents, got {shape:?}")));
    }
    Ok((shape[2] / 2, shape[3] / 2))
}

#[derive(Clone, Debug)]
pub enum Downsample {
    Conv(ConvBnAct),
    Rsfrs(Rsfrs),
}

impl Downsample {
    pub fn new(b: &mut Builder<'_>, mode: DownsampleMode, in_ch: usize, out_ch: usize) -> Self {
        match mode {
            DownsampleMode::ConvOnly => {
                Downsample::Conv(ConvBnAct::new(b, in_ch, out_ch, ConvSpec::same(3).stride(2), Act::Silu))
            }
            DownsampleMode::Rsfrs => Downsample::Rsfrs(Rsfrs::new(b, in_ch, out_ch)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Downsample::Conv(c) => {
                half_extent("downsample", ctx.graph.shape(x))?;
                c.forward(ctx, x)
            }
            Downsample::Rsfrs(r) => r.forward(ctx, x),
        }
    }
}

/// Global branch: 1x1 query/key/value projection, each position a token,
/// random-feature attention per head.
#[derive(Clone, Debug)]
pub struct Gam {
    pub qkv: Conv2d,
    /// `d x m` transposed projection, fixed at initialisation.
    pub projection: ParamId,
    pub heads: usize,
    pub cfg: AttentionConfig,
}

impl Gam {
    pub fn new(b: &mut Builder<'_>, ch: usize, cfg: &AttentionConfig) -> Self {
        let qkv = Conv2d::new(&mut b.sub("qkv"), ch, 3 * ch, ConvSpec::new(1), true);
        let d = ch / cfg.num_heads;
        let p = make_projection_with(b.rng(), d, cfg.num_features, cfg.scaler_mode);
        let projection = b.buffer("projection", p.p.transpose_last().expect("rank 2"));
        Self { qkv, projection, heads: cfg.num_heads, cfg: cfg.clone() }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if c % self.heads != 0 {
            return Err(shape_err("gam", alloc::format!("{c} channels not divisible by {} heads", self.heads)));
        }
        let (heads, d, l) = (self.heads, c / self.heads, h * w);
        let qkv = self.qkv.forward(ctx, x)?;
        let qkv = ctx.graph.reshape(qkv, &[n, 3, heads * d * l])?;
        let mut parts = [x; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = ctx.graph.slice(qkv, 1, i, 1)?;
            let s = ctx.graph.reshape(s, &[n, heads, d, l])?;
            *part = ctx.graph.transpose_last(s)?;
        }
        let p_t = self.bind_projection(ctx, d);
        let out = efficient_attention_graph(&mut ctx.graph, parts[0], parts[1], parts[2], p_t)?;
        let out = ctx.graph.transpose_last(out)?;
        ctx.graph.reshape(out, &[n, c, h, w])
    }

    fn bind_projection(&self, ctx: &mut Ctx<'_>, d: usize) -> Var {
        if self.cfg.refresh_projection && ctx.mode() == Mode::Train {
            let (m, mode) = (self.cfg.num_features, self.cfg.scaler_mode);
            if let Some(rng) = ctx.refresh_rng() {
                let p = make_projection_with(rng, d, m, mode);
                return ctx.input(p.p.transpose_last().expect("rank 2"));
            }
        }
        ctx.param(self.projection)
    }
}

/// One transformer-convolution layer: local conv branch and/or global
/// attention branch, concatenated, fused by a 1x1 convolution and added to
/// the input.
#[derive(Clone, Debug)]
pub struct Tcl {
    pub lam: Option<ConvBnAct>,
    pub gam: Option<Gam>,
    pub fuse: Conv2d,
}

impl Tcl {
    pub fn new(b: &mut Builder<'_>, ch: usize, scheme: BranchScheme, attn: &AttentionConfig) -> Self {
        let lam = scheme
            .has_local()
            .then(|| ConvBnAct::new(&mut b.sub("lam"), ch, ch, ConvSpec::same(3), Act::Relu));
        let gam = scheme.has_global().then(|| Gam::new(&mut b.sub("gam"), ch, attn));
        let branches = lam.is_some() as usize + gam.is_some() as usize;
        let fuse = Conv2d::new(&mut b.sub("fuse"), branches * ch, ch, ConvSpec::new(1), true);
        Self { lam, gam, fuse }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut branches = Vec::with_capacity(2);
        if let Some(lam) = &self.lam {
            branches.push(lam.forward(ctx, x)?);
        }
        if let Some(gam) = &self.gam {
            branches.push(gam.forward(ctx, x)?);
        }
        let cat = if branches.len() == 1 { branches[0] } else { ctx.graph.concat(&branches, 1)? };
        let fused = self.fuse.forward(ctx, cat)?;
        ctx.graph.add(fused, x)
    }
}

#[derive(Clone, Debug)]
pub struct Tcm {
    pub layers: Vec<Tcl>,
}

impl Tcm {
    pub fn new(b: &mut Builder<'_>, ch: usize, depth: usize, scheme: BranchScheme, attn: &AttentionConfig) -> Self {
        let layers = (0..depth)
            .map(|i| Tcl::new(&mut b.sub(&alloc::format!("{i}")), ch, scheme, attn))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// 1x1 reduction, three chained 5x5 max-pools, concatenation, 1x1 expansion.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub reduce: ConvBnAct,
    pub expand: ConvBnAct,
}

impl Sppf {
    pub fn new(b: &mut Builder<'_>, in_ch: usize, out_ch: usize) -> Self {
        let hidden = (in_ch / 2).max(1);
        Self {
            reduce: ConvBnAct::new(&mut b.sub("reduce"), in_ch, hidden, ConvSpec::new(1), Act::Silu),
            expand: ConvBnAct::new(&mut b.sub("expand"), 4 * hidden, out_ch, ConvSpec::new(1), Act::Silu),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y0 = self.reduce.forward(ctx, x)?;
        let pool = ConvSpec::same(5);
        let y1 = ctx.graph.max_pool(y0, pool)?;
        let y2 = ctx.graph.max_pool(y1, pool)?;
        let y3 = ctx.graph.max_pool(y2, pool)?;
        let cat = ctx.graph.concat(&[y0, y1, y2, y3], 1)?;
        self.expand.forward(ctx, cat)
    }
}

/// Backbone outputs at strides 8, 16 and 32 for the default stem.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub f3: Var,
    pub f4: Var,
    pub f7: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// F1 through F7.
    pub stages: [Var; 7],
    pub pyramid: FeaturePyramid,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Stem,
    pub down2: Downsample,
    pub down3: Downsample,
    pub down4: Downsample,
    pub proj5: Option<ConvBnAct>,
    pub tcm: Tcm,
    pub down6: Downsample,
    pub sppf: Sppf,
}

impl Backbone {
    pub fn new(b: &mut Builder<'_>, cfg: &BackboneConfig) -> Self {
        let c = cfg.channels;
        let dm = cfg.downsample_mode;
        Self {
            stem: Stem::new(&mut b.sub("stem"), cfg.patch_mode, cfg.stem_stride, 3, c[0]),
            down2: Downsample::new(&mut b.sub("down2"), dm, c[0], c[1]),
            down3: Downsample::new(&mut b.sub("down3"), dm, c[1], c[2]),
            down4: Downsample::new(&mut b.sub("down4"), dm, c[2], c[3]),
            proj5: (c[3] != c[4])
                .then(|| ConvBnAct::new(&mut b.sub("proj5"), c[3], c[4], ConvSpec::new(1), Act::Silu)),
            tcm: Tcm::new(&mut b.sub("tcm"), c[4], cfg.tcl_depth, cfg.branch_scheme, &cfg.attention),
            down6: Downsample::new(&mut b.sub("down6"), dm, c[4], c[5]),
            sppf: Sppf::new(&mut b.sub("sppf"), c[5], c[6]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<BackboneOutput> {
        let s = ctx.graph.shape(image);
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err("backbone", alloc::format!("expects [N, 3, H, W], got {s:?}")));
        }
        let f1 = self.stem.forward(ctx, image)?;
        let f2 = self.down2.forward(ctx, f1)?;
        let f3 = self.down3.forward(ctx, f2)?;
        let f4 = self.down4.forward(ctx, f3)?;
        let f5_in = match &self.proj5 {
            Some(p) => p.forward(ctx, f4)?,
            None => f4,
        };
        let f5 = self.tcm.forward(ctx, f5_in)?;
        let f6 = self.down6.forward(ctx, f5)?;
        let f7 = self.sppf.forward(ctx, f6)?;
        Ok(BackboneOutput { stages: [f1, f2, f3, f4, f5, f6, f7], pyramid: FeaturePyramid { f3, f4, f7 } })
    }
}
