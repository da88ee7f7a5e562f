//! Flat `section.key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; missing keys keep the values of the base configuration the file
//! is applied to. Lists are comma separated.
//!
//! ```text
//! model.image_size = 256
//! backbone.channels = 8, 16, 32, 32, 32, 32, 32
//! backbone.patch_mode = ssope3      # pte | ope | ssope3 | ssope5 | ssope7
//! neck.mode = dfpn                  # fpn | dfpn
//! train.lr = 0.001
//! ```

use std::fmt::Write as _;
use std::path::Path;

use tcleaf_core::config::{AlignInput, BranchScheme, DownsampleMode, ModelConfig, NeckMode, PatchMode, ScalerMode};

use crate::train::{Schedule, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Model and training settings read from one file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self { model: ModelConfig::toy(), train: TrainConfig::default() }
    }

    pub fn reference() -> Self {
        Self { model: ModelConfig::reference(), train: TrainConfig::reference() }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_enum<T>(v: &str, f: impl Fn(&str) -> Option<T>, choices: &str) -> Result<T, String> {
    f(v).ok_or_else(|| format!("unknown value {v:?}, expected one of {choices}"))
}

fn set(cfg: &mut RunConfig, key: &str, v: &str) -> Result<(), String> {
    let m = &mut cfg.model;
    let t = &mut cfg.train;
    match key {
        "model.image_size" => m.image_size = parse_num(v)?,
        "backbone.channels" => {
            let c = parse_list(v)?;
            m.backbone.channels = c.try_into().map_err(|c: Vec<usize>| format!("expected 7 widths, got {}", c.len()))?;
        }
        "backbone.tcl_depth" => m.backbone.tcl_depth = parse_num(v)?,
        "backbone.patch_mode" => m.backbone.patch_mode = parse_enum(v, PatchMode::parse, "pte, ope, ssope3, ssope5, ssope7")?,
        "backbone.downsample_mode" => m.backbone.downsample_mode = parse_enum(v, DownsampleMode::parse, "conv, rsfrs")?,
        "backbone.branch_scheme" => m.backbone.branch_scheme = parse_enum(v, BranchScheme::parse, "lam, gam, tcl")?,
        "backbone.stem_stride" => m.backbone.stem_stride = parse_num(v)?,
        "attention.num_heads" => m.backbone.attention.num_heads = parse_num(v)?,
        "attention.num_features" => m.backbone.attention.num_features = parse_num(v)?,
        "attention.scaler_mode" => m.backbone.attention.scaler_mode = parse_enum(v, ScalerMode::parse, "unit, sqrt_d")?,
        "attention.refresh_projection" => m.backbone.attention.refresh_projection = parse_bool(v)?,
        "neck.mode" => m.neck.mode = parse_enum(v, NeckMode::parse, "fpn, dfpn")?,
        "neck.width" => m.neck.width = parse_num(v)?,
        "neck.mrfp_kernels" => m.neck.mrfp_kernels = parse_list(v)?,
        "neck.dconv_kernel" => m.neck.dconv_kernel = parse_num(v)?,
        "neck.offset_bound" => m.neck.offset_bound = parse_num(v)?,
        "neck.c2f_depth" => m.neck.c2f_depth = parse_num(v)?,
        "neck.fsm_residual" => m.neck.fsm_residual = parse_bool(v)?,
        "neck.align_input" => m.neck.align_input = parse_enum(v, AlignInput::parse, "concat, context")?,
        "head.num_classes" => m.head.num_classes = parse_num(v)?,
        "head.reg_max" => m.head.reg_max = parse_num(v)?,
        "head.width" => m.head.width = parse_num(v)?,
        "loss.box_weight" => m.loss.box_weight = parse_num(v)?,
        "loss.dfl_weight" => m.loss.dfl_weight = parse_num(v)?,
        "loss.cls_weight" => m.loss.cls_weight = parse_num(v)?,
        "bn.eps" => m.bn.eps = parse_num(v)?,
        "bn.momentum" => m.bn.momentum = parse_num(v)?,
        "post.iou_threshold" => m.post.iou_threshold = parse_num(v)?,
        "post.score_threshold" => m.post.score_threshold = parse_num(v)?,
        "post.max_det" => m.post.max_det = parse_num(v)?,
        "train.lr" => t.lr = parse_num(v)?,
        "train.momentum" => t.momentum = parse_num(v)?,
        "train.epochs" => t.epochs = parse_num(v)?,
        "train.batch_size" => t.batch_size = parse_num(v)?,
        "train.seed" => t.seed = parse_num(v)?,
        "train.schedule" => t.schedule = parse_enum(v, Schedule::parse, "constant, cosine")?,
        "train.augment" => t.augment = parse_bool(v)?,
        "train.brightness" => t.brightness = parse_num(v)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// Applies `text` on top of `base` and validates the result.
pub fn parse_config(text: &str, base: RunConfig) -> Result<RunConfig, ConfigError> {
    let mut cfg = base;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ConfigError::Parse { line: i + 1, msg };
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if v.is_empty() {
            return Err(err(format!("empty value for {k}")));
        }
        set(&mut cfg, k, v).map_err(err)?;
    }
    validate(&cfg)?;
    Ok(cfg)
}

pub fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    cfg.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.train.validate().map_err(ConfigError::Invalid)
}

pub fn load_config(path: &Path, base: RunConfig) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_config(&text, base)
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Every key, in schema order. Floats use the shortest round-tripping form.
pub fn write_config(cfg: &RunConfig) -> String {
    let (m, t) = (&cfg.model, &cfg.train);
    let b = &m.backbone;
    let a = &b.attention;
    let n = &m.neck;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
    kv("model.image_size", m.image_size.to_string());
    kv("backbone.channels", join(&b.channels));
    kv("backbone.tcl_depth", b.tcl_depth.to_string());
    kv("backbone.patch_mode", b.patch_mode.name().into());
    kv("backbone.downsample_mode", b.downsample_mode.name().into());
    kv("backbone.branch_scheme", b.branch_scheme.name().into());
    kv("backbone.stem_stride", b.stem_stride.to_string());
    kv("attention.num_heads", a.num_heads.to_string());
    kv("attention.num_features", a.num_features.to_string());
    kv("attention.scaler_mode", a.scaler_mode.name().into());
    kv("attention.refresh_projection", a.refresh_projection.to_string());
    kv("neck.mode", n.mode.name().into());
    kv("neck.width", n.width.to_string());
    kv("neck.mrfp_kernels", join(&n.mrfp_kernels));
    kv("neck.dconv_kernel", n.dconv_kernel.to_string());
    kv("neck.offset_bound", format!("{:?}", n.offset_bound));
    kv("neck.c2f_depth", n.c2f_depth.to_string());
    kv("neck.fsm_residual", n.fsm_residual.to_string());
    kv("neck.align_input", n.align_input.name().into());
    kv("head.num_classes", m.head.num_classes.to_string());
    kv("head.reg_max", m.head.reg_max.to_string());
    kv("head.width", m.head.width.to_string());
    kv("loss.box_weight", format!("{:?}", m.loss.box_weight));
    kv("loss.dfl_weight", format!("{:?}", m.loss.dfl_weight));
    kv("loss.cls_weight", format!("{:?}", m.loss.cls_weight));
    kv("bn.eps", format!("{:?}", m.bn.eps));
    kv("bn.momentum", format!("{:?}", m.bn.momentum));
    kv("post.iou_threshold", format!("{:?}", m.post.iou_threshold));
    kv("post.score_threshold", format!("{:?}", m.post.score_threshold));
    kv("post.max_det", m.post.max_det.to_string());
    kv("train.lr", format!("{:?}", t.lr));
    kv("train.momentum", format!("{:?}", t.momentum));
    kv("train.epochs", t.epochs.to_string());
    kv("train.batch_size", t.batch_size.to_string());
    kv("train.seed", t.seed.to_string());
    kv("train.schedule", t.schedule.name().into());
    kv("train.augment", t.augment.to_string());
    kv("train.brightness", format!("{:?}", t.brightness));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::toy();
        cfg.model.backbone.patch_mode = PatchMode::Ope16;
        cfg.model.neck.mode = NeckMode::Fpn;
        cfg.train.lr = 0.0123;
        let text = write_config(&cfg);
        assert_eq!(parse_config(&text, RunConfig::reference()).unwrap(), cfg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_config("# c\nneck.width = 32\nneck.mode = bifpn\n", RunConfig::toy()).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 3, .. }), "{e}");
        let e = parse_config("\n\nnope\n", RunConfig::toy()).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 3, .. }));
        let e = parse_config("backbone.channels = 1, 2\n", RunConfig::toy()).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 1, .. }));
        let e = parse_config("unknown.key = 1\n", RunConfig::toy()).unwrap_err();
        assert!(e.to_string().contains("unknown key"));
    }

    #[test]
    fn validation_runs_after_parsing() {
        let e = parse_config("neck.width = 31\n", RunConfig::toy()).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(_)));
        let e = parse_config("train.batch_size = 0\n", RunConfig::toy()).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(_)));
    }
}
