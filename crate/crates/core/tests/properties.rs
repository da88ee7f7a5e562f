//! Invariants checked on generated inputs.

use proptest::prelude::*;
use tcleaf_core::attention::{efficient_attention, make_projection, EAConfig};
use tcleaf_core::augment::{apply, Augment};
use tcleaf_core::boxes::{iou, DetectionBox};
use tcleaf_core::config::{BnConfig, PostprocessConfig, ScalerMode};
use tcleaf_core::head::expected_bin;
use tcleaf_core::loss::ciou;
use tcleaf_core::metrics::{average_precision, map_suite, Interpolation, SuiteConfig};
use tcleaf_core::neck::{Fsm, OffsetPredictor};
use tcleaf_core::nms::nms;
use tcleaf_core::nn::{Builder, Ctx, Mode, ParamStore};
use tcleaf_core::rng::seeded;
use tcleaf_core::synth::{synth_scene, SynthSceneConfig};
use tcleaf_core::{Graph, Tensor};

fn unit_box() -> impl Strategy<Value = DetectionBox> {
    (0usize..3, 0.0f64..=1.0, 0.1f64..0.9, 0.1f64..0.9, 0.02f64..0.3, 0.02f64..0.3)
        .prop_map(|(c, s, cx, cy, w, h)| DetectionBox::new(c, s, cx, cy, w, h).clipped().unwrap())
}

fn images(max_boxes: usize) -> impl Strategy<Value = Vec<Vec<DetectionBox>>> {
    prop::collection::vec(prop::collection::vec(unit_box(), 0..max_boxes), 1..4)
}

/// Ground truth plus detections made by jittering, dropping and adding boxes.
fn scenario() -> impl Strategy<Value = (Vec<Vec<DetectionBox>>, Vec<Vec<DetectionBox>>)> {
    images(5).prop_flat_map(|gts| {
        let n = gts.len();
        let jitter = prop::collection::vec(prop::collection::vec((-0.05f64..0.05, 0.0f64..1.0, any::<bool>()), 5), n);
        let extra = prop::collection::vec(prop::collection::vec(unit_box(), 0..3), n);
        (Just(gts), jitter, extra).prop_map(|(gts, jit, extra)| {
            let dets = gts
                .iter()
                .zip(&jit)
                .zip(extra)
                .map(|((g, j), mut e)| {
                    let mut d: Vec<DetectionBox> = g
                        .iter()
                        .zip(j)
                        .filter(|(_, (_, _, keep))| *keep)
                        .filter_map(|(b, &(dx, s, _))| DetectionBox { cx: b.cx + dx, score: s, ..*b }.clipped())
                        .collect();
                    d.append(&mut e);
                    d
                })
                .collect();
            (gts, dets)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..2) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let s = g.sum_axis(y, axis).unwrap();
        for v in g.value(s).data() {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_preserves_constants(c in -10.0f64..10.0, h in 1usize..9, w in 1usize..9, oh in 1usize..9, ow in 1usize..9) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, h, w], c));
        let y = g.bilinear_resize(x, oh, ow).unwrap();
        for v in g.value(y).data() {
            prop_assert!((v - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn fsm_weights_strictly_inside_unit_interval(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let fsm = Fsm::new(&mut Builder::new(&mut store, &mut rng), 4, false);
        let x = Tensor::randn(&[2, 4, 5, 5], &mut rng).scale(scale);
        let mut ctx = Ctx::new(&store, Mode::Eval, BnConfig::default());
        let xv = ctx.input(x);
        let w = fsm.weights(&mut ctx, xv).unwrap();
        for &v in ctx.graph.value(w).data() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn offsets_respect_the_clamp(seed in any::<u64>(), bound in 0.5f64..8.0, gain in 1.0f64..100.0) {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let pred = OffsetPredictor::new(&mut Builder::new(&mut store, &mut rng), 6, 3, bound);
        *store.get_mut(pred.conv.weight) = Tensor::randn(&[18, 6, 1, 1], &mut rng).scale(gain);
        let a = Tensor::randn(&[1, 3, 4, 4], &mut rng);
        let b = Tensor::randn(&[1, 3, 4, 4], &mut rng);
        let mut ctx = Ctx::new(&store, Mode::Eval, BnConfig::default());
        let (av, bv) = (ctx.input(a), ctx.input(b));
        let o = pred.forward(&mut ctx, av, bv).unwrap();
        prop_assert_eq!(ctx.graph.shape(o), &[1, 18, 4, 4]);
        prop_assert!(ctx.graph.value(o).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn ap_bounded_and_monotone_in_threshold((gts, dets) in scenario()) {
        for c in 0..3 {
            let mut prev = f64::INFINITY;
            for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
                if let Some(ap) = average_precision(&dets, &gts, c, t, Interpolation::AllPoint) {
                    prop_assert!((0.0..=1.0).contains(&ap));
                    prop_assert!(ap <= prev + 1e-12);
                    prev = ap;
                }
            }
        }
    }

    #[test]
    fn ap_depends_on_ranking_only((gts, dets) in scenario(), a in 0.1f64..3.0, p in 0.3f64..3.0) {
        // s -> (a s)^p / (1 + (a s)^p) is strictly increasing on [0, 1].
        let f = |s: f64| { let u = (a * s).powf(p); u / (1.0 + u) };
        let rescaled: Vec<Vec<DetectionBox>> = dets.iter().map(|d| d.iter().map(|b| DetectionBox { score: f(b.score), ..*b }).collect()).collect();
        for c in 0..3 {
            prop_assert_eq!(
                average_precision(&dets, &gts, c, 0.5, Interpolation::AllPoint),
                average_precision(&rescaled, &gts, c, 0.5, Interpolation::AllPoint)
            );
        }
    }

    #[test]
    fn strict_map_never_exceeds_map50((gts, dets) in scenario()) {
        for interpolation in [Interpolation::AllPoint, Interpolation::Point101] {
            let cfg = SuiteConfig { num_classes: 3, score_threshold: 0.25, interpolation };
            let r = map_suite(&dets, &gts, &cfg, "p").unwrap();
            prop_assert!(r.map50_95 <= r.map50 + 1e-12);
            for v in [r.precision, r.recall, r.f1, r.map50, r.map50_95] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn nms_keeps_a_non_overlapping_subset(boxes in prop::collection::vec(unit_box(), 0..12), thr in 0.1f64..0.9) {
        let cfg = PostprocessConfig { iou_threshold: thr, score_threshold: 0.25, max_det: 300 };
        let kept = nms(&boxes, &cfg);
        prop_assert!(kept.iter().all(|k| boxes.contains(k)));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(a, b) <= thr);
            }
        }
    }

    #[test]
    fn ciou_self_and_box_loss_range(a in unit_box(), b in unit_box()) {
        // The loss works in stride units, where the 1e-7 guard is negligible
        // next to box areas; normalised tiny boxes would see it.
        let (ca, cb) = (a.corners().map(|v| 64.0 * v), b.corners().map(|v| 64.0 * v));
        prop_assert!((ciou(ca, ca).unwrap() - 1.0).abs() < 1e-6);
        let l = 1.0 - ciou(ca, cb).unwrap();
        prop_assert!((0.0..2.0).contains(&l));
    }

    #[test]
    fn bracketing_distribution_decodes_to_its_side(t in 0.0f64..16.0) {
        let k = t.floor() as usize;
        let mut probs = [0.0; 17];
        probs[k] = (k + 1) as f64 - t;
        if k + 1 < 17 { probs[k + 1] = t - k as f64; }
        let logits: Vec<f64> = probs.iter().map(|p| (p + 1e-300).ln()).collect();
        prop_assert!((expected_bin(&logits) - t).abs() < 1e-6);
    }

    #[test]
    fn ea_rows_are_convex(seed in any::<u64>(), scale in 0.1f64..1.5) {
        let n = 6;
        let mut rng = seeded(seed);
        let q = Tensor::randn(&[2, n, n], &mut rng).scale(scale);
        let k = Tensor::randn(&[2, n, n], &mut rng).scale(scale);
        let v = Tensor::concat(&[&Tensor::eye(n).reshape(&[1, n, n]).unwrap(); 2], 0).unwrap();
        let p = make_projection(&EAConfig { num_heads: 2, d: n, m: 24, seed, scaler_mode: ScalerMode::SqrtD }).unwrap();
        let out = efficient_attention(&q, &k, &v, &p).unwrap();
        for row in out.data().chunks(n) {
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn augmented_boxes_stay_valid(seed in any::<u64>(), delta in -0.5f64..0.5) {
        let mut cfg = SynthSceneConfig::toy(seed);
        cfg.size = 64;
        cfg.radius = (2.0, 8.0);
        let s = synth_scene(&cfg).sample;
        for op in [Augment::HFlip, Augment::VFlip, Augment::Rot90, Augment::Brightness(delta)] {
            let a = apply(&s, op);
            prop_assert_eq!(a.boxes.len(), s.boxes.len());
            prop_assert!(a.boxes.iter().all(DetectionBox::is_valid));
            prop_assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generator_is_deterministic(seed in any::<u64>()) {
        let mut cfg = SynthSceneConfig::toy(seed);
        cfg.size = 64;
        cfg.radius = (2.0, 8.0);
        let a = synth_scene(&cfg);
        let b = synth_scene(&cfg);
        prop_assert!(a.sample.image.bit_eq(&b.sample.image));
        prop_assert_eq!(a, b);
    }
}
