//! SGD training loop with per-epoch validation and best-checkpoint tracking.

use rand::seq::SliceRandom;
use rand::Rng;

use tcleaf_core::augment::{apply, Augment};
use tcleaf_core::boxes::DetectionBox;
use tcleaf_core::loss::LossComponents;
use tcleaf_core::metrics::{map_suite, Interpolation, MetricsReport, SuiteConfig};
use tcleaf_core::model::{batch_images, Detector};
use tcleaf_core::nn::{Ctx, Mode, ParamStore};
use tcleaf_core::optim::Sgd;
use tcleaf_core::rng::{derive, seeded, Rng64};
use tcleaf_core::synth::AnnotatedImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over the run.
    Cosine,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Schedule::Constant, Schedule::Cosine].into_iter().find(|m| m.name() == s)
    }

    pub fn lr_at(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Random horizontal and vertical flips.
    pub augment: bool,
    /// Brightness jitter drawn from `U(-b, b)`; 0 disables it.
    pub brightness: f64,
}

impl Default for TrainConfig {
    /// Desk-scale settings for the synthetic task.
    fn default() -> Self {
        Self { lr: 0.001, momentum: 0.937, epochs: 10, batch_size: 8, seed: 0, schedule: Schedule::Constant, augment: true, brightness: 0.0 }
    }
}

impl TrainConfig {
    pub fn reference() -> Self {
        Self { epochs: 200, batch_size: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(format!("train.lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("train.epochs and train.batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.brightness) {
            return Err(format!("train.brightness must lie in [0, 1], got {}", self.brightness));
        }
        Ok(())
    }
}

/// One row of the training log. Losses are batch means over the epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub box_loss: f64,
    pub dfl: f64,
    pub cls: f64,
    pub total: f64,
    pub map50: f64,
    pub map50_95: f64,
}

pub const LOG_HEADER: &str = "epoch,L_box,L_dfl,L_cls,L_total,mAP@50,mAP@50:95";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.box_loss, self.dfl, self.cls, self.total, self.map50, self.map50_95
        )
    }
}

/// State captured when a step produced a non-finite loss or gradient.
#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub epoch: usize,
    pub step: usize,
    pub components: LossComponents,
    pub sources: Vec<String>,
    /// Parameters whose gradient contained NaN or infinity.
    pub bad_grads: Vec<String>,
    pub lr: f64,
}

impl std::fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = &self.components;
        writeln!(f, "epoch {} step {} lr {}", self.epoch, self.step, self.lr)?;
        writeln!(f, "L_box {} L_dfl {} L_cls {} L_total {} positives {}", c.box_loss, c.dfl, c.cls, c.total, c.num_pos)?;
        writeln!(f, "batch: {}", self.sources.join(" "))?;
        write!(f, "non-finite gradients: {}", if self.bad_grads.is_empty() { "none".into() } else { self.bad_grads.join(" ") })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss, aborting\n{0}")]
    NonFinite(Box<Diagnostics>),
    #[error(transparent)]
    Core(#[from] tcleaf_core::error::Error),
    #[error("empty training set")]
    Empty,
}

pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// 0-based epoch of the best validation mAP@50.
    pub best_epoch: usize,
    pub best: ParamStore,
    pub last: ParamStore,
}

/// Runs the whole evaluation pipeline over `samples`.
pub fn evaluate(det: &Detector, store: &ParamStore, samples: &[AnnotatedImage], interp: Interpolation, tag: &str) -> Result<MetricsReport, TrainError> {
    let dets = predict_all(det, store, samples)?;
    let gts: Vec<Vec<DetectionBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    let cfg = SuiteConfig { num_classes: det.cfg.head.num_classes, score_threshold: 0.25, interpolation: interp };
    Ok(map_suite(&dets, &gts, &cfg, tag)?)
}

pub fn predict_all(det: &Detector, store: &ParamStore, samples: &[AnnotatedImage]) -> Result<Vec<Vec<DetectionBox>>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(10) {
        let imgs = batch_images(&chunk.iter().collect::<Vec<_>>())?;
        out.extend(det.predict(store, &imgs)?);
    }
    Ok(out)
}

fn augmented(s: &AnnotatedImage, cfg: &TrainConfig, rng: &mut Rng64) -> AnnotatedImage {
    let mut s = s.clone();
    if cfg.augment {
        if rng.random_bool(0.5) {
            s = apply(&s, Augment::HFlip);
        }
        if rng.random_bool(0.5) {
            s = apply(&s, Augment::VFlip);
        }
    }
    if cfg.brightness > 0.0 {
        let d = rng.random_range(-cfg.brightness..=cfg.brightness);
        s = apply(&s, Augment::Brightness(d));
    }
    s
}

/// Trains for `cfg.epochs` epochs. `on_epoch` sees every log row as it is
/// produced and returns `false` to stop early.
pub fn train(
    det: &Detector,
    mut store: ParamStore,
    train_set: &[AnnotatedImage],
    val_set: &[AnnotatedImage],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> bool,
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut rng = seeded(derive(cfg.seed, 1));
    let refresh = det.cfg.backbone.attention.refresh_projection;
    let mut log = Vec::with_capacity(cfg.epochs);
    let (mut best, mut best_epoch, mut best_map) = (store.clone(), 0, f64::NEG_INFINITY);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<AnnotatedImage> = chunk.iter().map(|&i| augmented(&train_set[i], cfg, &mut rng)).collect();
            let images = batch_images(&samples.iter().collect::<Vec<_>>())?;
            let targets: Vec<Vec<DetectionBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
            let mut ctx = Ctx::new(&store, Mode::Train, det.cfg.bn);
            if refresh {
                ctx = ctx.with_refresh_rng(seeded(derive(cfg.seed, 1000 + step)));
            }
            let x = ctx.input(images);
            let out = det.forward(&mut ctx, x)?;
            let loss = det.loss(&mut ctx, &out, &targets)?;
            let c = loss.components;
            let mut grads = ctx.graph.backward(loss.objective)?;
            let grads = ctx.param_grads(&mut grads);
            let bad: Vec<String> = grads.iter().filter(|(_, g)| !g.is_finite()).map(|(id, _)| store.name(*id).to_string()).collect();
            if !c.total.is_finite() || !bad.is_empty() {
                return Err(TrainError::NonFinite(Box::new(Diagnostics {
                    epoch,
                    step: step as usize,
                    components: c,
                    sources: samples.iter().map(|s| s.source.clone()).collect(),
                    bad_grads: bad,
                    lr: opt.lr,
                })));
            }
            let updates = ctx.take_bn_updates();
            drop(ctx);
            opt.step(&mut store, &grads);
            store.apply_bn_updates(&updates);
            for (s, v) in sums.iter_mut().zip([c.box_loss, c.dfl, c.cls, c.total]) {
                *s += v;
            }
            batches += 1;
            step += 1;
        }
        let report = if val_set.is_empty() { None } else { Some(evaluate(det, &store, val_set, Interpolation::AllPoint, "val")?) };
        let n = batches as f64;
        let row = EpochLog {
            epoch,
            box_loss: sums[0] / n,
            dfl: sums[1] / n,
            cls: sums[2] / n,
            total: sums[3] / n,
            map50: report.as_ref().map_or(0.0, |r| r.map50),
            map50_95: report.as_ref().map_or(0.0, |r| r.map50_95),
        };
        if row.map50 > best_map {
            best_map = row.map50;
            best_epoch = epoch;
            best = store.clone();
        }
        log.push(row);
        if !on_epoch(&row) {
            break;
        }
    }
    Ok(TrainOutcome { log, best_epoch, best, last: store })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(Schedule::Cosine.lr_at(0.1, 0, 10), 0.1);
        assert!(Schedule::Cosine.lr_at(0.1, 10, 10).abs() < 1e-15);
        assert!((Schedule::Cosine.lr_at(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert_eq!(Schedule::Constant.lr_at(0.1, 7, 10), 0.1);
    }

    #[test]
    fn log_row_matches_header() {
        let r = EpochLog { epoch: 3, box_loss: 1.0, dfl: 2.0, cls: 3.0, total: 6.0, map50: 0.5, map50_95: 0.25 };
        assert_eq!(r.csv_row().split(',').count(), LOG_HEADER.split(',').count());
    }
}
