//! Deformable convolution, NMS and AP against independent references.

use tcleaf_core::boxes::DetectionBox;
use tcleaf_core::config::PostprocessConfig;
use tcleaf_core::nms::nms_indices;
use tcleaf_core::ops::ConvSpec;
use tcleaf_core::reference::{ap_hand_results, deform_zero_offset_sweep, exhaustive_nms, nms_sweep};
use tcleaf_core::rng::seeded;
use tcleaf_core::{Graph, Tensor};

fn conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), spec).unwrap();
    g.value(y).clone()
}

fn deform(x: &Tensor, off: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Tensor {
    let mut g = Graph::new();
    let (xv, ov) = (g.constant(x.clone()), g.constant(off.clone()));
    let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
    let y = g.deform_conv2d(xv, ov, wv, Some(bv), spec).unwrap();
    g.value(y).clone()
}

#[test]
fn deform_with_zero_offsets_is_conv_on_100_configs() {
    let worst = deform_zero_offset_sweep(11, 100);
    assert!(worst <= 1e-6, "worst {worst:e}");
}

#[test]
fn deform_integer_shift_matches_conv_of_shifted_image() {
    let mut rng = seeded(12);
    let (h, w) = (7, 6);
    let x = Tensor::randn(&[1, 2, h, w], &mut rng);
    let wt = Tensor::randn(&[3, 2, 3, 3], &mut rng);
    let b = Tensor::zeros(&[3]);
    let spec = ConvSpec::same(3);
    let mut off = Tensor::zeros(&[1, 18, h, w]);
    for t in 0..9 {
        for y in 0..h {
            for xx in 0..w {
                off.set(&[0, 2 * t, y, xx], 1.0);
            }
        }
    }
    let shifted = Tensor::from_fn(&[1, 2, h, w], |i| {
        let (r, xx) = ((i / w) % h, i % w);
        let c = i / (h * w);
        if r + 1 < h { x.at(&[0, c, r + 1, xx]) } else { 0.0 }
    });
    let a = deform(&x, &off, &wt, &b, spec);
    let e = conv(&shifted, &wt, &b, spec);
    // Row 0 differs: plain conv reads padding where the shifted tap lands on row 0.
    for o in 0..3 {
        for y in 1..h {
            for xx in 0..w {
                assert!((a.at(&[0, o, y, xx]) - e.at(&[0, o, y, xx])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn deform_half_pixel_offset_samples_ramp_midpoint() {
    let (h, w) = (5, 6);
    let x = Tensor::from_fn(&[1, 1, h, w], |i| 2.0 * (i / w) as f64 + 3.0 * (i % w) as f64 + 1.0);
    let wt = Tensor::ones(&[1, 1, 1, 1]);
    let b = Tensor::zeros(&[1]);
    let mut off = Tensor::zeros(&[1, 2, h, w]);
    for y in 0..h {
        for xx in 0..w {
            off.set(&[0, 1, y, xx], 0.5);
        }
    }
    let out = deform(&x, &off, &wt, &b, ConvSpec::new(1));
    for y in 0..h {
        for xx in 0..w - 1 {
            let want = 2.0 * y as f64 + 3.0 * (xx as f64 + 0.5) + 1.0;
            assert_eq!(out.at(&[0, 0, y, xx]), want);
        }
    }
}

#[test]
fn nms_matches_exhaustive_reference_1000_trials() {
    assert_eq!(nms_sweep(13, 1000, 10), None);
}

#[test]
fn exhaustive_reference_agrees_on_a_worked_case() {
    // Two overlapping class-0 boxes, one disjoint, one of another class.
    let b = |c, s, cx| DetectionBox::new(c, s, cx, 0.5, 0.2, 0.2);
    let boxes = [b(0, 0.9, 0.3), b(0, 0.8, 0.32), b(0, 0.7, 0.8), b(1, 0.6, 0.31), b(0, 0.2, 0.8)];
    let cfg = PostprocessConfig { iou_threshold: 0.5, score_threshold: 0.25, max_det: 300 };
    assert_eq!(exhaustive_nms(&boxes, &cfg), vec![0, 2, 3]);
    assert_eq!(nms_indices(&boxes, &cfg), vec![0, 2, 3]);
}

#[test]
fn ap_matches_threshold_sweep_on_hand_cases() {
    for (got, sweep, hand) in ap_hand_results() {
        assert_eq!(got, sweep);
        assert_eq!(got, hand);
    }
}
