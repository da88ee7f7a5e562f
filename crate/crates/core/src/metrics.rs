//! Detection metrics: precision, recall, F1, average precision over IoU
//! thresholds, and the drop between two evaluation conditions.

use alloc::string::String;
use alloc::vec::Vec;

use crate::boxes::{iou, DetectionBox};
use crate::error::{Error, Result};

/// `P = tp / (tp + fp)`, `R = tp / (tp + fn)`, `F1 = 2PR / (P + R)`, each 0 when undefined.
pub fn prf1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    /// Area under the monotone precision envelope.
    AllPoint,
    /// Mean envelope precision sampled at recall 0, 0.01, ..., 1.
    Point101,
}

/// Outcome of greedy matching for one class at one IoU threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(score, is_tp)` for each detection of the class, best score first.
    pub detections: Vec<(f64, bool)>,
    /// Per image, whether each ground truth of the class was matched.
    pub gt_matched: Vec<Vec<bool>>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.detections.iter().filter(|d| d.1).count()
    }

    pub fn fp(&self) -> usize {
        self.detections.len() - self.tp()
    }

    pub fn num_gt(&self) -> usize {
        self.gt_matched.iter().map(Vec::len).sum()
    }

    pub fn fn_(&self) -> usize {
        self.gt_matched.iter().flatten().filter(|m| !**m).count()
    }
}

/// Detections of `class` taken best first (ties in input order, images in
/// order); each is a true positive when it overlaps a still unmatched ground
/// truth of the same class and image with IoU at least `iou_thr`, the one
/// with the highest IoU being consumed.
pub fn match_class(
    dets: &[Vec<DetectionBox>],
    gts: &[Vec<DetectionBox>],
    class: usize,
    iou_thr: f64,
    min_score: f64,
) -> MatchResult {
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for (i, d) in ds.iter().enumerate() {
            if d.class_id == class && d.score >= min_score {
                order.push((img, i));
            }
        }
    }
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score).then(a.cmp(b)));
    let gt_idx: Vec<Vec<usize>> = gts
        .iter()
        .map(|g| (0..g.len()).filter(|&j| g[j].class_id == class).collect())
        .collect();
    let mut gt_matched: Vec<Vec<bool>> = gt_idx.iter().map(|v| alloc::vec![false; v.len()]).collect();
    let mut detections = Vec::with_capacity(order.len());
    for (img, i) in order {
        let d = &dets[img][i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(idx) = gt_idx.get(img) {
            for (slot, &j) in idx.iter().enumerate() {
                if gt_matched[img][slot] {
                    continue;
                }
                let o = iou(d, &gts[img][j]);
                if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((slot, o));
                }
            }
        }
        if let Some((slot, _)) = best {
            gt_matched[img][slot] = true;
        }
        detections.push((d.score, best.is_some()));
    }
    MatchResult { detections, gt_matched }
}

/// AP from score-ordered TP flags; `None` when there is no ground truth.
pub fn ap_from_matches(m: &MatchResult, interp: Interpolation) -> Option<f64> {
    let n_gt = m.num_gt();
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(m.detections.len());
    let mut precision = Vec::with_capacity(m.detections.len());
    let mut tp = 0usize;
    for (k, (_, hit)) in m.detections.iter().enumerate() {
        tp += *hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    Some(match interp {
        Interpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        Interpolation::Point101 => {
            let mut acc = 0.0;
            for t in 0..=100 {
                let r = t as f64 / 100.0;
                let p = recall.iter().position(|&x| x >= r - 1e-12).map_or(0.0, |i| precision[i]);
                acc += p;
            }
            acc / 101.0
        }
    })
}

pub fn average_precision(
    dets: &[Vec<DetectionBox>],
    gts: &[Vec<DetectionBox>],
    class: usize,
    iou_thr: f64,
    interp: Interpolation,
) -> Option<f64> {
    ap_from_matches(&match_class(dets, gts, class, iou_thr, 0.0), interp)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub num_gt: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Evaluation condition, e.g. `ideal` or `in-field`.
    pub tag: String,
    pub per_class: Vec<ClassMetrics>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50: f64,
    pub map50_95: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub num_classes: usize,
    /// Operating point for precision, recall and F1.
    pub score_threshold: f64,
    pub interpolation: Interpolation,
}

/// Per-class and aggregate metrics. mAP averages over classes that have
/// ground truth; P, R and F1 pool counts over all classes at IoU 0.5.
pub fn map_suite(dets: &[Vec<DetectionBox>], gts: &[Vec<DetectionBox>], cfg: &SuiteConfig, tag: &str) -> Result<MetricsReport> {
    if dets.len() != gts.len() {
        return Err(Error::InvalidArgument(alloc::format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    for b in dets.iter().chain(gts).flatten() {
        if b.class_id >= cfg.num_classes {
            return Err(Error::InvalidArgument(alloc::format!("unknown class id {} (num_classes {})", b.class_id, cfg.num_classes)));
        }
    }
    let thresholds = coco_thresholds();
    let mut per_class = Vec::with_capacity(cfg.num_classes);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let (mut sum50, mut sum5095, mut counted) = (0.0, 0.0, 0usize);
    for c in 0..cfg.num_classes {
        let op = match_class(dets, gts, c, 0.5, cfg.score_threshold);
        tp += op.tp();
        fp += op.fp();
        fn_ += op.fn_();
        let (p, r, f1) = prf1(op.tp(), op.fp(), op.fn_());
        let aps: Vec<Option<f64>> = thresholds
            .iter()
            .map(|&t| ap_from_matches(&match_class(dets, gts, c, t, 0.0), cfg.interpolation))
            .collect();
        let ap50 = aps[0].unwrap_or(0.0);
        let ap5095 = aps.iter().map(|a| a.unwrap_or(0.0)).sum::<f64>() / thresholds.len() as f64;
        if aps[0].is_some() {
            sum50 += ap50;
            sum5095 += ap5095;
            counted += 1;
        }
        per_class.push(ClassMetrics { class_id: c, num_gt: op.num_gt(), precision: p, recall: r, f1, ap50, ap50_95: ap5095 });
    }
    let (precision, recall, f1) = prf1(tp, fp, fn_);
    let denom = counted.max(1) as f64;
    Ok(MetricsReport {
        tag: String::from(tag),
        per_class,
        precision,
        recall,
        f1,
        map50: sum50 / denom,
        map50_95: sum5095 / denom,
    })
}

/// The four headline metrics compared across conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Headline {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
}

impl From<&MetricsReport> for Headline {
    fn from(r: &MetricsReport) -> Self {
        Self { precision: r.precision, recall: r.recall, map50: r.map50, map50_95: r.map50_95 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustnessDrop {
    pub delta: Headline,
    /// Sum of the four deltas.
    pub cumulative: f64,
}

/// `ideal - in_field` per metric.
pub fn robustness_drop(ideal: &Headline, in_field: &Headline) -> RobustnessDrop {
    let delta = Headline {
        precision: ideal.precision - in_field.precision,
        recall: ideal.recall - in_field.recall,
        map50: ideal.map50 - in_field.map50,
        map50_95: ideal.map50_95 - in_field.map50_95,
    };
    RobustnessDrop { delta, cumulative: delta.precision + delta.recall + delta.map50 + delta.map50_95 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(c: usize, s: f64, cx: f64) -> DetectionBox {
        DetectionBox::new(c, s, cx, 0.5, 0.1, 0.1)
    }

    #[test]
    fn prf1_cases() {
        let (p, r, f) = prf1(8, 2, 2);
        assert!((p - 0.8).abs() < 1e-15 && (r - 0.8).abs() < 1e-15 && (f - 0.8).abs() < 1e-15);
        assert_eq!(prf1(0, 0, 5), (0.0, 0.0, 0.0));
        assert_eq!(prf1(0, 0, 0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_and_empty() {
        let gts = alloc::vec![alloc::vec![b(0, 1.0, 0.2), b(1, 1.0, 0.6)]];
        let cfg = SuiteConfig { num_classes: 2, score_threshold: 0.25, interpolation: Interpolation::AllPoint };
        let r = map_suite(&gts, &gts, &cfg, "ideal").unwrap();
        assert_eq!((r.map50, r.map50_95, r.precision, r.recall), (1.0, 1.0, 1.0, 1.0));
        let none = alloc::vec![alloc::vec![]];
        assert_eq!(average_precision(&none, &gts, 0, 0.5, Interpolation::AllPoint), Some(0.0));
        assert_eq!(average_precision(&gts, &none, 0, 0.5, Interpolation::AllPoint), None);
    }

    #[test]
    fn one_gt_never_matched_twice() {
        let gts = alloc::vec![alloc::vec![b(0, 1.0, 0.5)]];
        let dets = alloc::vec![alloc::vec![b(0, 0.9, 0.5), b(0, 0.8, 0.5)]];
        let m = match_class(&dets, &gts, 0, 0.5, 0.0);
        assert_eq!(m.detections, alloc::vec![(0.9, true), (0.8, false)]);
        assert_eq!(m.tp() + m.fp(), 2);
        assert_eq!(m.tp() + m.fn_(), 1);
    }

    #[test]
    fn unknown_class_rejected() {
        let gts = alloc::vec![alloc::vec![b(5, 1.0, 0.5)]];
        let cfg = SuiteConfig { num_classes: 3, score_threshold: 0.25, interpolation: Interpolation::AllPoint };
        assert!(map_suite(&gts, &gts, &cfg, "x").is_err());
    }

    #[test]
    fn table_drop_row() {
        let ideal = Headline { precision: 85.9, recall: 83.6, map50: 89.5, map50_95: 65.2 };
        let field = Headline { precision: 87.2, recall: 69.9, map50: 78.2, map50_95: 55.1 };
        let d = robustness_drop(&ideal, &field);
        let r = |x: f64| (x * 10.0).round() / 10.0;
        assert_eq!([r(d.delta.precision), r(d.delta.recall), r(d.delta.map50), r(d.delta.map50_95)], [-1.3, 13.7, 11.3, 10.1]);
        assert_eq!(r(d.cumulative), 33.8);
        let z = robustness_drop(&ideal, &ideal);
        assert_eq!(z.cumulative, 0.0);
    }
}
