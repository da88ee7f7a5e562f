//! Stage-shape and operation-count audits.

use std::time::{Duration, Instant};

use tcleaf_core::attention::{efficient_attention_graph, make_projection, EAConfig};
use tcleaf_core::attention::exact_attention_graph;
use tcleaf_core::config::{ModelConfig, ScalerMode};
use tcleaf_core::error::Result;
use tcleaf_core::flops::flop_report;
use tcleaf_core::graph::Graph;
use tcleaf_core::model::Detector;
use tcleaf_core::nn::{Ctx, Mode};
use tcleaf_core::rng::seeded;
use tcleaf_core::tensor::Tensor;

/// Output stride of each backbone stage F1..F7 for a 640 input
/// (320, 160, 80, 40, 40, 20, 20).
pub const STAGE_STRIDES: [usize; 7] = [2, 4, 8, 16, 16, 32, 32];
/// Strides of neck outputs F8..F11.
pub const NECK_STRIDES: [usize; 4] = [16, 8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRow {
    pub stage: String,
    /// `[C, H, W]`
    pub expected: [usize; 3],
    pub actual: [usize; 3],
}

impl ShapeRow {
    pub fn passed(&self) -> bool {
        self.expected == self.actual
    }
}

#[derive(Clone, Debug)]
pub struct ShapeAudit {
    pub rows: Vec<ShapeRow>,
    pub params: usize,
    pub elapsed: Duration,
}

impl ShapeAudit {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(ShapeRow::passed)
    }

    pub fn first_failure(&self) -> Option<&ShapeRow> {
        self.rows.iter().find(|r| !r.passed())
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<6} {:>18} {:>18}  result\n", "stage", "expected CxHxW", "actual CxHxW");
        let fmt = |d: [usize; 3]| format!("{}x{}x{}", d[0], d[1], d[2]);
        for r in &self.rows {
            s += &format!("{:<6} {:>18} {:>18}  {}\n", r.stage, fmt(r.expected), fmt(r.actual), if r.passed() { "PASS" } else { "FAIL" });
        }
        s
    }
}

/// Expected `[C, H, W]` per stage: channel widths from the configuration,
/// spatial extents from the fixed stride ladder.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, [usize; 3])> {
    let s = cfg.image_size;
    let c = cfg.backbone.channels;
    let mut rows: Vec<(String, [usize; 3])> =
        (0..7).map(|i| (format!("F{}", i + 1), [c[i], s / STAGE_STRIDES[i], s / STAGE_STRIDES[i]])).collect();
    for (i, st) in NECK_STRIDES.iter().enumerate() {
        rows.push((format!("F{}", i + 8), [cfg.neck.width, s / st, s / st]));
    }
    rows
}

/// One eval-mode forward pass of a single image, compared stage by stage.
pub fn audit_shapes(cfg: &ModelConfig) -> Result<ShapeAudit> {
    let start = Instant::now();
    let (det, store) = Detector::new(cfg, 0)?;
    let s = cfg.image_size;
    let image = Tensor::rand_uniform(&[1, 3, s, s], 0.0, 1.0, &mut seeded(1));
    let mut ctx = Ctx::new(&store, Mode::Eval, cfg.bn);
    let x = ctx.input(image);
    let out = det.forward(&mut ctx, x)?;
    let n = &out.neck;
    let vars: Vec<_> = out.backbone.stages.iter().copied().chain([n.f8, n.f9, n.f10, n.f11]).collect();
    let rows = expected_shapes(cfg)
        .into_iter()
        .zip(vars)
        .map(|((stage, expected), v)| {
            let sh = ctx.graph.shape(v);
            ShapeRow { stage, expected, actual: [sh[1], sh[2], sh[3]] }
        })
        .collect();
    let params = store.iter().filter(|(_, _, t)| *t).map(|(_, t, _)| t.numel()).sum();
    Ok(ShapeAudit { rows, params, elapsed: start.elapsed() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    Ea,
    Mhsa,
}

/// Operation count of one attention evaluation on `[heads, len, dim]`
/// operands, read from the tape tally.
pub fn attention_flops(kind: AttnKind, heads: usize, len: usize, dim: usize, features: usize) -> Result<u64> {
    let mut rng = seeded(3);
    let mut g = Graph::new();
    g.enable_flop_tally();
    let mut mk = || Tensor::randn(&[heads, len, dim], &mut rng).scale(0.5);
    let (q, k, v) = (mk(), mk(), mk());
    let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
    match kind {
        AttnKind::Mhsa => {
            exact_attention_graph(&mut g, q, k, v)?;
        }
        AttnKind::Ea => {
            let p = make_projection(&EAConfig { num_heads: heads, d: dim, m: features, seed: 0, scaler_mode: ScalerMode::SqrtD })?;
            let p_t = g.constant(p.p.transpose_last()?);
            efficient_attention_graph(&mut g, q, k, v, p_t)?;
        }
    }
    Ok(flop_report(&g).total)
}

/// Figures quoted for the 8 x 1600 x 32 configuration.
pub const QUOTED_MHSA: f64 = 2.56e9;
pub const QUOTED_EA: f64 = 8.19e5;
pub const RATIO_TARGET: f64 = 1e3;

#[derive(Clone, Copy, Debug)]
pub struct FlopAudit {
    pub heads: usize,
    pub len: usize,
    pub dim: usize,
    pub features: usize,
    pub mhsa: u64,
    pub ea: u64,
}

impl FlopAudit {
    pub fn ratio(&self) -> f64 {
        self.mhsa as f64 / self.ea as f64
    }

    pub fn report(&self) -> String {
        format!(
            "config heads={} len={} dim={} features={}\n\
             MHSA ops {:>14}  (quoted {:.3e}, measured/quoted {:.3})\n\
             EA   ops {:>14}  (quoted {:.3e}, measured/quoted {:.3})\n\
             ratio MHSA/EA {:.2} (quoted {:.1}, target >= {:.0})",
            self.heads,
            self.len,
            self.dim,
            self.features,
            self.mhsa,
            QUOTED_MHSA,
            self.mhsa as f64 / QUOTED_MHSA,
            self.ea,
            QUOTED_EA,
            self.ea as f64 / QUOTED_EA,
            self.ratio(),
            QUOTED_MHSA / QUOTED_EA,
            RATIO_TARGET
        )
    }
}

pub fn audit_flops(heads: usize, len: usize, dim: usize, features: usize) -> Result<FlopAudit> {
    Ok(FlopAudit {
        heads,
        len,
        dim,
        features,
        mhsa: attention_flops(AttnKind::Mhsa, heads, len, dim, features)?,
        ea: attention_flops(AttnKind::Ea, heads, len, dim, features)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_expectations_follow_the_input() {
        let mut cfg = ModelConfig::reference();
        cfg.image_size = 320;
        let e = expected_shapes(&cfg);
        assert_eq!(e[0].1, [64, 160, 160]);
        assert_eq!(e[6].1, [512, 10, 10]);
        assert_eq!(e[8].1, [256, 40, 40]);
    }

    #[test]
    fn toy_audit_passes_and_stem_stride_four_fails_at_f1() {
        let cfg = ModelConfig::toy();
        assert!(audit_shapes(&cfg).unwrap().passed());
        let mut bad = cfg;
        bad.backbone.stem_stride = 4;
        let a = audit_shapes(&bad).unwrap();
        assert_eq!(a.first_failure().unwrap().stage, "F1");
    }

    #[test]
    fn counts_scale_with_length() {
        let ea1 = attention_flops(AttnKind::Ea, 2, 64, 8, 16).unwrap();
        let ea2 = attention_flops(AttnKind::Ea, 2, 128, 8, 16).unwrap();
        let mh1 = attention_flops(AttnKind::Mhsa, 2, 64, 8, 16).unwrap();
        let mh2 = attention_flops(AttnKind::Mhsa, 2, 128, 8, 16).unwrap();
        let r_ea = ea2 as f64 / ea1 as f64;
        let r_mh = mh2 as f64 / mh1 as f64;
        assert!((r_ea - 2.0).abs() < 0.05, "{r_ea}");
        assert!(r_mh > 3.8 && r_mh <= 4.0, "{r_mh}");
    }
}
