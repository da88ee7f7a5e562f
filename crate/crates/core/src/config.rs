//! Architectural hyperparameters. [`ModelConfig`] is the single source of
//! truth for every block; the `tcleaf` crate reads and writes it as a flat
//! `section.key = value` file.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Stem variants compared in the patch-embedding ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchMode {
    /// Non-overlapping 16x16 patches, stride 16.
    Pte16,
    /// Overlapping 20x20 window, stride 16.
    Ope16,
    Ssope3,
    Ssope5,
    Ssope7,
}

impl PatchMode {
    pub const ALL: [PatchMode; 5] = [PatchMode::Pte16, PatchMode::Ope16, PatchMode::Ssope3, PatchMode::Ssope5, PatchMode::Ssope7];

    /// `(kernel, stride, padding)` of the embedding convolution.
    pub fn geometry(self) -> (usize, usize, usize) {
        match self {
            PatchMode::Pte16 => (16, 16, 0),
            PatchMode::Ope16 => (20, 16, 2),
            PatchMode::Ssope3 => (3, 2, 1),
            PatchMode::Ssope5 => (5, 2, 2),
            PatchMode::Ssope7 => (7, 2, 3),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PatchMode::Pte16 => "pte",
            PatchMode::Ope16 => "ope",
            PatchMode::Ssope3 => "ssope3",
            PatchMode::Ssope5 => "ssope5",
            PatchMode::Ssope7 => "ssope7",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownsampleMode {
    /// Plain 3x3 stride-2 convolution blocks.
    ConvOnly,
    /// Learned stride-2 convolution fused with bilinear resampling.
    Rsfrs,
}

impl DownsampleMode {
    pub fn name(self) -> &'static str {
        match self {
            DownsampleMode::ConvOnly => "conv",
            DownsampleMode::Rsfrs => "rsfrs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [DownsampleMode::ConvOnly, DownsampleMode::Rsfrs].into_iter().find(|m| m.name() == s)
    }
}

/// Which attention branches a transformer-convolution layer keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchScheme {
    LamOnly,
    GamOnly,
    Tcl,
}

impl BranchScheme {
    pub const ALL: [BranchScheme; 3] = [BranchScheme::LamOnly, BranchScheme::GamOnly, BranchScheme::Tcl];

    pub fn has_local(self) -> bool {
        matches!(self, BranchScheme::LamOnly | BranchScheme::Tcl)
    }

    pub fn has_global(self) -> bool {
        matches!(self, BranchScheme::GamOnly | BranchScheme::Tcl)
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchScheme::LamOnly => "lam",
            BranchScheme::GamOnly => "gam",
            BranchScheme::Tcl => "tcl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeckMode {
    Fpn,
    Dfpn,
}

impl NeckMode {
    pub const ALL: [NeckMode; 2] = [NeckMode::Fpn, NeckMode::Dfpn];

    pub fn name(self) -> &'static str {
        match self {
            NeckMode::Fpn => "fpn",
            NeckMode::Dfpn => "dfpn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Row scaling applied to the orthogonal projection block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalerMode {
    /// Rows keep the unit norm they get from QR.
    Unit,
    /// Rows scaled to norm `sqrt(d)`, matching Gaussian rows in expectation.
    SqrtD,
}

impl ScalerMode {
    pub fn name(self) -> &'static str {
        match self {
            ScalerMode::Unit => "unit",
            ScalerMode::SqrtD => "sqrt_d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ScalerMode::Unit, ScalerMode::SqrtD].into_iter().find(|m| m.name() == s)
    }
}

/// Which tensor the deformable convolution samples from inside the alignment block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignInput {
    /// `concat(context, selected lower feature)`
    Concat,
    /// The resampled upper-level context alone.
    Context,
}

impl AlignInput {
    pub fn name(self) -> &'static str {
        match self {
            AlignInput::Concat => "concat",
            AlignInput::Context => "context",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [AlignInput::Concat, AlignInput::Context].into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    /// Number of random features `m`.
    pub num_features: usize,
    pub scaler_mode: ScalerMode,
    /// Resample the projection on every training forward pass instead of
    /// keeping the one drawn at initialisation.
    pub refresh_projection: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Widths of stages F1 through F7.
    pub channels: [usize; 7],
    pub tcl_depth: usize,
    pub patch_mode: PatchMode,
    pub downsample_mode: DownsampleMode,
    pub branch_scheme: BranchScheme,
    /// Stride of the stem for the overlapping (SSOPE) modes; 2 in every
    /// supported configuration, other values exist to exercise the shape audit.
    pub stem_stride: usize,
    pub attention: AttentionConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeckConfig {
    pub mode: NeckMode,
    /// Channel width shared by all neck levels.
    pub width: usize,
    pub mrfp_kernels: Vec<usize>,
    pub dconv_kernel: usize,
    pub offset_bound: f64,
    pub c2f_depth: usize,
    /// Adds the unweighted input back after channel selection.
    pub fsm_residual: bool,
    pub align_input: AlignInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub reg_max: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub box_weight: f64,
    pub dfl_weight: f64,
    pub cls_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { box_weight: 7.5, dfl_weight: 1.5, cls_weight: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self { eps: 1e-5, momentum: 0.03 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub max_det: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.7, score_threshold: 0.25, max_det: 300 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub head: HeadConfig,
    pub loss: LossWeights,
    pub bn: BnConfig,
    pub post: PostprocessConfig,
}

impl ModelConfig {
    /// Full-width 640x640 configuration used for the stage-shape audit.
    pub fn reference() -> Self {
        Self {
            image_size: 640,
            backbone: BackboneConfig {
                channels: [64, 128, 256, 512, 512, 512, 512],
                tcl_depth: 4,
                patch_mode: PatchMode::Ssope3,
                downsample_mode: DownsampleMode::Rsfrs,
                branch_scheme: BranchScheme::Tcl,
                stem_stride: 2,
                attention: AttentionConfig {
                    num_heads: 8,
                    num_features: 64,
                    scaler_mode: ScalerMode::SqrtD,
                    refresh_projection: false,
                },
            },
            neck: NeckConfig {
                mode: NeckMode::Dfpn,
                width: 256,
                mrfp_kernels: alloc::vec![5, 7],
                dconv_kernel: 3,
                offset_bound: 8.0,
                c2f_depth: 1,
                fsm_residual: false,
                align_input: AlignInput::Concat,
            },
            head: HeadConfig { num_classes: 3, reg_max: 16, width: 128 },
            loss: LossWeights::default(),
            bn: BnConfig::default(),
            post: PostprocessConfig::default(),
        }
    }

    /// Reduced-width configuration for the 256x256 synthetic task.
    pub fn toy() -> Self {
        let mut cfg = Self::reference();
        cfg.image_size = 256;
        cfg.backbone.channels = [8, 16, 32, 32, 32, 32, 32];
        cfg.backbone.attention.num_heads = 2;
        cfg.backbone.attention.num_features = 16;
        cfg.neck.width = 32;
        cfg.head.width = 16;
        cfg
    }

    /// Levels' strides for this stem: the pyramid sits at `4s`, `8s`, `16s`
    /// where `s` is the stem stride of F1.
    pub fn strides(&self) -> [usize; 3] {
        let s = self.f1_stride();
        [4 * s, 8 * s, 16 * s]
    }

    pub fn f1_stride(&self) -> usize {
        match self.backbone.patch_mode {
            PatchMode::Pte16 | PatchMode::Ope16 => 2,
            _ => self.backbone.stem_stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidArgument(m));
        let b = &self.backbone;
        if b.channels.contains(&0) {
            return bad(format!("backbone channels must be positive: {:?}", b.channels));
        }
        if b.tcl_depth == 0 {
            return bad("backbone.tcl_depth must be >= 1".into());
        }
        if b.stem_stride == 0 {
            return bad("backbone.stem_stride must be >= 1".into());
        }
        let a = &b.attention;
        if a.num_heads == 0 || a.num_features == 0 {
            return bad("attention heads and features must be >= 1".into());
        }
        if !b.channels[4].is_multiple_of(a.num_heads) {
            return bad(format!("F5 width {} not divisible by {} heads", b.channels[4], a.num_heads));
        }
        let n = &self.neck;
        if n.width == 0 || !n.width.is_multiple_of(2) {
            return bad(format!("neck.width must be positive and even for the C2f split, got {}", n.width));
        }
        if n.mrfp_kernels.is_empty() || n.mrfp_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("neck.mrfp_kernels must be odd, got {:?}", n.mrfp_kernels));
        }
        if n.dconv_kernel.is_multiple_of(2) {
            return bad(format!("neck.dconv_kernel must be odd, got {}", n.dconv_kernel));
        }
        if !(n.offset_bound > 0.0 && n.offset_bound.is_finite()) {
            return bad(format!("neck.offset_bound must be positive, got {}", n.offset_bound));
        }
        let h = &self.head;
        if h.num_classes == 0 || h.reg_max == 0 || h.width == 0 {
            return bad("head.num_classes, head.reg_max and head.width must be >= 1".into());
        }
        let l = &self.loss;
        if [l.box_weight, l.dfl_weight, l.cls_weight].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.bn.eps > 0.0) || !(0.0..=1.0).contains(&self.bn.momentum) {
            return bad("bn.eps must be > 0 and bn.momentum in [0, 1]".into());
        }
        let p = &self.post;
        if !(0.0..=1.0).contains(&p.iou_threshold) || !(0.0..=1.0).contains(&p.score_threshold) || p.max_det == 0 {
            return bad("post thresholds must lie in [0, 1] and max_det >= 1".into());
        }
        let total = self.strides()[2];
        if self.image_size == 0 || !self.image_size.is_multiple_of(total) {
            return bad(format!("image_size {} must be a positive multiple of {total}", self.image_size));
        }
        Ok(())
    }
}
