//! Slow, obviously-correct references for the fast paths, and the seeded
//! comparison sweeps that pit one against the other. Used by the test suites
//! and the acceptance run; nothing in the model calls into here.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::boxes::{iou, DetectionBox};
use crate::config::PostprocessConfig;
use crate::graph::Graph;
use crate::metrics::{average_precision, Interpolation};
use crate::nms::nms_indices;
use crate::ops::ConvSpec;
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Direct seven-deep loop with zero padding.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: ConvSpec) -> Tensor {
    let (n, c, h, wd) = x.dims4("x").expect("4-d input");
    let (o, cg, kh, kw) = w.dims4("w").expect("4-d weight");
    let og = o / s.groups;
    let (oh, ow) = s.output_hw("naive", h, wd).expect("valid geometry");
    assert_eq!(cg * s.groups, c);
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for bi in 0..n {
        for oc in 0..o {
            let grp = oc / og;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ci in 0..cg {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * s.stride + i * s.dilation) as isize - s.padding as isize;
                                let ix = (xo * s.stride + j * s.dilation) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[bi, grp * cg + ci, iy as usize, ix as usize]) * w.at(&[oc, ci, i, j]);
                            }
                        }
                    }
                    out.set(&[bi, oc, y, xo], acc);
                }
            }
        }
    }
    out
}

fn graph_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, spec).expect("valid conv");
    g.value(y).clone()
}

fn graph_deform(x: &Tensor, off: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let mut g = Graph::new();
    let (xv, ov, wv) = (g.constant(x.clone()), g.constant(off.clone()), g.constant(w.clone()));
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.deform_conv2d(xv, ov, wv, bv, spec).expect("valid deform conv");
    g.value(y).clone()
}

/// Worst absolute difference between the tape conv and [`naive_conv2d`]
/// over `configs` random geometries (groups, stride, padding, dilation).
pub fn conv_sweep(seed: u64, configs: usize) -> f64 {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let groups = [1, 1, 2][rng.random_range(0..3)];
        let cg = rng.random_range(1..4);
        let og = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let spec = ConvSpec::new(k)
            .stride(rng.random_range(1..4))
            .padding(rng.random_range(0..3))
            .dilation(rng.random_range(1..3))
            .groups(groups);
        let span = spec.dilation * (k - 1) + 1;
        let h = rng.random_range(span..span + 7);
        let w = rng.random_range(span..span + 7);
        let n = rng.random_range(1..3);
        let x = Tensor::randn(&[n, cg * groups, h, w], &mut rng);
        let wt = Tensor::randn(&[og * groups, cg, k, k], &mut rng);
        let b = rng.random_bool(0.5).then(|| Tensor::randn(&[og * groups], &mut rng));
        let got = graph_conv(&x, &wt, b.as_ref(), spec);
        let want = naive_conv2d(&x, &wt, b.as_ref(), spec);
        assert_eq!(got.shape(), want.shape(), "{spec:?}");
        worst = worst.max(got.max_abs_diff(&want));
    }
    worst
}

/// Worst absolute difference between deformable conv with all-zero offsets
/// and plain conv over `configs` random geometries.
pub fn deform_zero_offset_sweep(seed: u64, configs: usize) -> f64 {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let k = rng.random_range(1..5);
        let spec = ConvSpec::new(k)
            .stride(rng.random_range(1..3))
            .padding(rng.random_range(0..3))
            .dilation(rng.random_range(1..3));
        let span = spec.dilation * (k - 1) + 1;
        let (h, w) = (rng.random_range(span..span + 6), rng.random_range(span..span + 6));
        let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let x = Tensor::randn(&[n, c, h, w], &mut rng);
        let wt = Tensor::randn(&[o, c, k, k], &mut rng);
        let b = Tensor::randn(&[o], &mut rng);
        let (oh, ow) = spec.output_hw("sweep", h, w).expect("valid geometry");
        let off = Tensor::zeros(&[n, 2 * k * k, oh, ow]);
        worst = worst.max(graph_deform(&x, &off, &wt, Some(&b), spec).max_abs_diff(&graph_conv(&x, &wt, Some(&b), spec)));
    }
    worst
}

/// Searches every subset for the one that is self-consistent under the
/// greedy rule: a box is kept iff no kept box of its class that ranks ahead
/// of it overlaps it above the threshold. Returns kept indices in rank order.
///
/// # Panics
/// If the fixed point is not unique, which would make the rule ambiguous.
pub fn exhaustive_nms(c: &[DetectionBox], cfg: &PostprocessConfig) -> Vec<usize> {
    let ahead = |a: usize, b: usize| c[a].score > c[b].score || (c[a].score == c[b].score && a < b);
    let clash = |a: usize, b: usize| c[a].class_id == c[b].class_id && iou(&c[a], &c[b]) > cfg.iou_threshold;
    let eligible: Vec<usize> = (0..c.len()).filter(|&i| c[i].score > cfg.score_threshold).collect();
    assert!(eligible.len() < 24, "exhaustive search is exponential");
    let mut found = Vec::new();
    for mask in 0u32..(1 << eligible.len()) {
        let set: Vec<usize> = (0..eligible.len()).filter(|&b| mask >> b & 1 == 1).map(|b| eligible[b]).collect();
        let ok = eligible.iter().all(|&i| {
            let suppressed = set.iter().any(|&j| j != i && ahead(j, i) && clash(j, i));
            set.contains(&i) != suppressed
        });
        if ok {
            found.push(set);
        }
    }
    assert_eq!(found.len(), 1, "greedy fixed point is unique");
    let mut s = found.pop().expect("one fixed point");
    s.sort_by(|&a, &b| if ahead(a, b) { Ordering::Less } else { Ordering::Greater });
    s.truncate(cfg.max_det);
    s
}

fn coarse_box(rng: &mut impl Rng) -> DetectionBox {
    // Coarse grids make IoU ties and heavy overlaps common.
    let cx = rng.random_range(2..9) as f64 / 10.0;
    let cy = rng.random_range(2..9) as f64 / 10.0;
    let w = rng.random_range(1..5) as f64 / 10.0;
    let h = rng.random_range(1..5) as f64 / 10.0;
    let score = rng.random_range(0..12) as f64 / 10.0 * 0.9;
    DetectionBox::new(rng.random_range(0..2), score.min(1.0), cx, cy, w, h)
}

/// Runs `trials` random NMS problems of at most `max_boxes` boxes and
/// returns the first trial where greedy NMS and [`exhaustive_nms`] disagree.
pub fn nms_sweep(seed: u64, trials: usize, max_boxes: usize) -> Option<usize> {
    let mut rng = seeded(seed);
    let cfg = PostprocessConfig { iou_threshold: 0.5, score_threshold: 0.25, max_det: 300 };
    (0..trials).find(|_| {
        let n = rng.random_range(0..=max_boxes);
        let boxes: Vec<DetectionBox> = (0..n).map(|_| coarse_box(&mut rng)).collect();
        nms_indices(&boxes, &cfg) != exhaustive_nms(&boxes, &cfg)
    })
}

/// Precision and recall at every distinct score threshold, then the area
/// under the upper envelope. `scored` holds (score, is-TP) per detection.
pub fn sweep_ap(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pr: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<&(f64, bool)> = scored.iter().filter(|s| s.0 >= t).collect();
            let tp = kept.iter().filter(|s| s.1).count() as f64;
            (tp / num_gt as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (k, &(r, _)) in pr.iter().enumerate() {
        let envelope = pr[k..].iter().map(|x| x.1).fold(0.0, f64::max);
        ap += (r - prev_r) * envelope;
        prev_r = r;
    }
    ap
}

/// One worked AP case: two ground truths, three detections.
#[derive(Clone, Debug)]
pub struct ApCase {
    pub name: &'static str,
    pub detections: Vec<DetectionBox>,
    /// TP flags of the same detections in descending score order.
    pub flags: Vec<(f64, bool)>,
    /// Value worked out by hand.
    pub hand: f64,
}

pub fn ap_hand_ground_truth() -> Vec<DetectionBox> {
    vec![DetectionBox::new(0, 1.0, 0.2, 0.5, 0.1, 0.1), DetectionBox::new(0, 1.0, 0.6, 0.5, 0.1, 0.1)]
}

pub fn ap_hand_cases() -> Vec<ApCase> {
    let d = |score, cx| DetectionBox::new(0, score, cx, 0.5, 0.1, 0.1);
    vec![
        ApCase {
            name: "TP, FP, TP",
            detections: vec![d(0.9, 0.2), d(0.8, 0.9), d(0.7, 0.6)],
            flags: vec![(0.9, true), (0.8, false), (0.7, true)],
            hand: 0.5 + 0.5 * (2.0 / 3.0),
        },
        ApCase {
            name: "FP, TP, TP",
            detections: vec![d(0.7, 0.6), d(0.95, 0.9), d(0.8, 0.2)],
            flags: vec![(0.95, false), (0.8, true), (0.7, true)],
            hand: 0.5 * (2.0 / 3.0) + 0.5 * (2.0 / 3.0),
        },
        ApCase {
            name: "TP, duplicate FP, miss",
            detections: vec![d(0.6, 0.2), d(0.5, 0.2), d(0.4, 0.9)],
            flags: vec![(0.6, true), (0.5, false), (0.4, false)],
            hand: 0.5,
        },
    ]
}

/// `(library AP, sweep AP, hand value)` for every hand case.
pub fn ap_hand_results() -> Vec<(f64, f64, f64)> {
    let gts = vec![ap_hand_ground_truth()];
    ap_hand_cases()
        .into_iter()
        .map(|c| {
            let got = average_precision(&[c.detections], &gts, 0, 0.5, Interpolation::AllPoint).expect("class has ground truth");
            (got, sweep_ap(&c.flags, 2), c.hand)
        })
        .collect()
}

/// Relative Frobenius error of random-feature attention against exact
/// attention at heads 2, length 64, head dim 16 with `m` features. Inputs
/// are N(0, 0.25) draws from `derive(seed, 0)`, the projection comes from
/// `derive(seed, 1)`.
pub fn ea_relative_error(m: usize, seed: u64) -> f64 {
    use crate::attention::{efficient_attention, exact_softmax_attention, make_projection, EAConfig};
    use crate::config::ScalerMode;
    use crate::rng::derive;
    let (h, l, d) = (2, 64, 16);
    let mut rng = seeded(derive(seed, 0));
    let mut mk = || Tensor::randn(&[h, l, d], &mut rng).scale(0.5);
    let (q, k, v) = (mk(), mk(), mk());
    let p = make_projection(&EAConfig { num_heads: h, d, m, seed: derive(seed, 1), scaler_mode: ScalerMode::SqrtD }).expect("valid projection");
    let approx = efficient_attention(&q, &k, &v, &p).expect("shapes agree");
    let exact = exact_softmax_attention(&q, &k, &v).expect("shapes agree");
    approx.zip_map(&exact, |a, b| a - b).expect("same shape").norm() / exact.norm()
}
