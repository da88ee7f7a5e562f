//! Model blocks: degenerate weight settings, composition and shape contracts.

use tcleaf_core::backbone::{Rsfrs, Sppf, Tcl, Tcm};
use tcleaf_core::boxes::DetectionBox;
use tcleaf_core::config::{BnConfig, BranchScheme, LossWeights, ModelConfig, NeckMode};
use tcleaf_core::gradcheck::{grad_check, GradCheckConfig};
use tcleaf_core::head::{DecoupledHead, HeadLevel};
use tcleaf_core::loss::total_loss;
use tcleaf_core::model::Detector;
use tcleaf_core::neck::{C2f, Dab, Fsm, OffsetPredictor};
use tcleaf_core::nn::{Builder, Ctx, Mode, ParamStore};
use tcleaf_core::rng::seeded;
use tcleaf_core::{Graph, Tensor};

/// Zeroes every convolution weight and bias whose name starts with one of `prefixes`.
fn zero_convs(store: &mut ParamStore, prefixes: &[&str]) {
    let names: Vec<String> = store
        .iter()
        .filter(|(n, _, _)| prefixes.iter().any(|p| n.starts_with(p)) && (n.ends_with("weight") || n.ends_with("bias")))
        .map(|(n, _, _)| n.to_string())
        .collect();
    for n in names {
        let id = store.id(&n).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
}

fn eval_ctx(store: &ParamStore) -> Ctx<'_> {
    Ctx::new(store, Mode::Eval, BnConfig::default())
}

#[test]
fn tcl_with_zero_fusion_is_the_identity() {
    let attn = ModelConfig::toy().backbone.attention;
    for scheme in BranchScheme::ALL {
        let mut store = ParamStore::new();
        let mut rng = seeded(1);
        let tcl = Tcl::new(&mut Builder::new(&mut store, &mut rng).sub("tcl"), 8, scheme, &attn);
        zero_convs(&mut store, &["tcl.fuse"]);
        let x = Tensor::randn(&[1, 8, 6, 6], &mut rng);
        let mut ctx = eval_ctx(&store);
        let xv = ctx.input(x.clone());
        let y = tcl.forward(&mut ctx, xv).unwrap();
        assert!(ctx.graph.value(y).bit_eq(&x), "{scheme:?}");
        assert_eq!(tcl.lam.is_some(), scheme.has_local());
        assert_eq!(tcl.gam.is_some(), scheme.has_global());
    }
}

#[test]
fn tcm_is_the_layers_applied_in_order() {
    let attn = ModelConfig::toy().backbone.attention;
    let mut store = ParamStore::new();
    let mut rng = seeded(2);
    let tcm = Tcm::new(&mut Builder::new(&mut store, &mut rng).sub("tcm"), 8, 4, BranchScheme::Tcl, &attn);
    let x = Tensor::randn(&[1, 8, 4, 4], &mut rng);

    let mut ctx = eval_ctx(&store);
    let xv = ctx.input(x.clone());
    let stacked = tcm.forward(&mut ctx, xv).unwrap();
    let mut manual = xv;
    for l in &tcm.layers {
        manual = l.forward(&mut ctx, manual).unwrap();
    }
    assert!(ctx.graph.value(stacked).bit_eq(ctx.graph.value(manual)));
    assert!(!ctx.graph.value(stacked).bit_eq(&x));

    zero_convs(&mut store, &["tcm.0.fuse", "tcm.1.fuse", "tcm.2.fuse", "tcm.3.fuse"]);
    let mut ctx = eval_ctx(&store);
    let xv = ctx.input(x.clone());
    let y = tcm.forward(&mut ctx, xv).unwrap();
    assert!(ctx.graph.value(y).bit_eq(&x));
}

#[test]
fn rsfrs_passes_a_constant_field_through_the_resampling_path() {
    let mut store = ParamStore::new();
    let mut rng = seeded(3);
    let r = Rsfrs::new(&mut Builder::new(&mut store, &mut rng).sub("r"), 3, 4);
    zero_convs(&mut store, &["r.conv"]);
    // Fusion selects input channel c of the resampled half for output c < 3.
    let mut sel = Tensor::zeros(&[4, 7, 1, 1]);
    for c in 0..3 {
        sel.set(&[c, 4 + c, 0, 0], 1.0);
    }
    *store.get_mut(r.fuse.conv.weight) = sel;
    let x = Tensor::from_fn(&[1, 3, 8, 8], |i| [0.5, -1.0, 2.0][i / 64]);
    let mut ctx = eval_ctx(&store);
    let xv = ctx.input(x);
    let y = r.forward(&mut ctx, xv).unwrap();
    let out = ctx.graph.value(y);
    assert_eq!(out.shape(), &[1, 4, 4, 4]);
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let s = 1.0 / (1.0 + BnConfig::default().eps).sqrt();
    for (c, want) in [silu(0.5 * s), silu(-s), silu(2.0 * s), 0.0].into_iter().enumerate() {
        for &v in &out.data()[c * 16..(c + 1) * 16] {
            assert!((v - want).abs() < 1e-12, "channel {c}: {v} vs {want}");
        }
    }
}

#[test]
fn sppf_keeps_constant_fields_constant() {
    let mut store = ParamStore::new();
    let mut rng = seeded(4);
    let s = Sppf::new(&mut Builder::new(&mut store, &mut rng), 6, 6);
    let x = Tensor::from_fn(&[1, 6, 5, 5], |i| (i / 25) as f64 * 0.3 - 0.7);
    let mut ctx = eval_ctx(&store);
    let xv = ctx.input(x);
    let y = s.forward(&mut ctx, xv).unwrap();
    let out = ctx.graph.value(y);
    assert_eq!(out.shape(), &[1, 6, 5, 5]);
    for ch in out.data().chunks(25) {
        assert!(ch.iter().all(|&v| (v - ch[0]).abs() < 1e-12));
    }
}

#[test]
fn fsm_gate_at_zero_and_saturation() {
    let mut store = ParamStore::new();
    let mut rng = seeded(5);
    let fsm = Fsm::new(&mut Builder::new(&mut store, &mut rng).sub("fsm"), 4, false);
    let x = Tensor::randn(&[2, 4, 3, 3], &mut rng);
    zero_convs(&mut store, &["fsm"]);
    let mut ctx = eval_ctx(&store);
    let xv = ctx.input(x.clone());
    let y = fsm.forward(&mut ctx, xv).unwrap();
    assert!(ctx.graph.value(y).bit_eq(&x.scale(0.5)));

    *store.get_mut(fsm.gate.bias.unwrap()) = Tensor::full(&[4], 50.0);
    let mut ctx = eval_ctx(&store);
    let xv = ctx.input(x.clone());
    let y = fsm.forward(&mut ctx, xv).unwrap();
    assert!(ctx.graph.value(y).max_abs_diff(&x) < 1e-20);
}

#[test]
fn zero_offset_predictor_gives_zero_offsets_with_eighteen_channels() {
    let mut store = ParamStore::new();
    let mut rng = seeded(6);
    let p = OffsetPredictor::new(&mut Builder::new(&mut store, &mut rng), 8, 3, 8.0);
    let mut ctx = eval_ctx(&store);
    let a = ctx.input(Tensor::randn(&[1, 4, 5, 5], &mut rng));
    let b = ctx.input(Tensor::randn(&[1, 4, 5, 5], &mut rng));
    let o = p.forward(&mut ctx, a, b).unwrap();
    assert_eq!(ctx.graph.shape(o), &[1, 18, 5, 5]);
    assert!(ctx.graph.value(o).data().iter().all(|&v| v == 0.0));
    let c = ctx.input(Tensor::randn(&[1, 4, 4, 4], &mut rng));
    assert!(p.forward(&mut ctx, a, c).is_err());
}

#[test]
fn dab_with_zeroed_alignment_reduces_to_refining_half_the_lower_level() {
    let cfg = ModelConfig::toy().neck;
    let mut store = ParamStore::new();
    let mut rng = seeded(7);
    let dab = Dab::new(&mut Builder::new(&mut store, &mut rng).sub("dab"), &cfg);
    zero_convs(&mut store, &["dab.mrfp", "dab.down", "dab.fsm", "dab.offsets", "dab.dconv"]);
    let w = cfg.width;
    let upper = Tensor::randn(&[1, w, 8, 8], &mut rng);
    let lower = Tensor::randn(&[1, w, 4, 4], &mut rng);
    let mut ctx = eval_ctx(&store);
    let (u, l) = (ctx.input(upper), ctx.input(lower.clone()));
    let t = dab.trace(&mut ctx, u, l).unwrap();
    assert_eq!(ctx.graph.shape(t.out), &[1, w, 4, 4]);
    assert!(ctx.graph.value(t.offsets).data().iter().all(|&v| v == 0.0));
    let half = ctx.input(lower.scale(0.5));
    let direct = dab.c2f.forward(&mut ctx, half).unwrap();
    assert!(ctx.graph.value(t.out).bit_eq(ctx.graph.value(direct)));
    assert!(dab.trace(&mut ctx, l, l).is_err());
}

#[test]
fn c2f_keeps_its_width_for_any_depth() {
    for depth in 0..3 {
        let mut store = ParamStore::new();
        let mut rng = seeded(8);
        let c = C2f::new(&mut Builder::new(&mut store, &mut rng), 6, depth);
        let mut ctx = eval_ctx(&store);
        let x = ctx.input(Tensor::randn(&[2, 6, 3, 3], &mut rng));
        let y = c.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.graph.shape(y), &[2, 6, 3, 3]);
        let odd = ctx.input(Tensor::zeros(&[1, 5, 3, 3]));
        assert!(c.forward(&mut ctx, odd).is_err());
    }
}

#[test]
fn head_channels_and_zeroed_outputs() {
    let cfg = ModelConfig::reference().head;
    let mut store = ParamStore::new();
    let mut rng = seeded(9);
    let head = DecoupledHead::new(&mut Builder::new(&mut store, &mut rng).sub("h"), 8, &cfg);
    zero_convs(&mut store, &["h.cls.out"]);
    let mut ctx = eval_ctx(&store);
    let x = ctx.input(Tensor::randn(&[1, 8, 4, 4], &mut rng));
    let out = head.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.graph.shape(out.reg), &[1, 68, 4, 4]);
    assert_eq!(ctx.graph.shape(out.cls), &[1, 3, 4, 4]);
    let p = ctx.graph.sigmoid(out.cls);
    assert!(ctx.graph.value(p).data().iter().all(|&v| v == 0.5));
}

#[test]
fn fpn_and_dfpn_are_shape_interchangeable() {
    let mut shapes = Vec::new();
    for mode in NeckMode::ALL {
        let mut cfg = ModelConfig::toy();
        cfg.image_size = 64;
        cfg.neck.mode = mode;
        let (det, store) = Detector::new(&cfg, 0).unwrap();
        let mut ctx = eval_ctx(&store);
        let x = ctx.input(Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut seeded(10)));
        let out = det.forward(&mut ctx, x).unwrap();
        let s: Vec<Vec<usize>> = out.neck.levels().iter().map(|v| ctx.graph.shape(*v).to_vec()).collect();
        shapes.push(s);
    }
    assert_eq!(shapes[0], shapes[1]);
    assert_eq!(shapes[0], vec![vec![1, 32, 8, 8], vec![1, 32, 4, 4], vec![1, 32, 2, 2]]);
}

#[test]
fn offset_branch_receives_gradient() {
    let mut cfg = ModelConfig::toy();
    cfg.image_size = 64;
    let (det, store) = Detector::new(&cfg, 3).unwrap();
    let mut ctx = Ctx::new(&store, Mode::Train, cfg.bn);
    let x = ctx.input(Tensor::rand_uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut seeded(11)));
    let out = det.forward(&mut ctx, x).unwrap();
    let targets = vec![vec![DetectionBox::new(0, 1.0, 0.5, 0.5, 0.3, 0.2)], vec![DetectionBox::new(2, 1.0, 0.3, 0.6, 0.1, 0.1)]];
    let loss = det.loss(&mut ctx, &out, &targets).unwrap();
    let mut grads = ctx.graph.backward(loss.objective).unwrap();
    let pg = ctx.param_grads(&mut grads);
    let offset_norm: f64 = pg
        .iter()
        .filter(|(id, _)| store.name(*id).contains("offsets.weight"))
        .map(|(_, g)| g.norm())
        .sum();
    assert!(offset_norm > 0.0);
}

fn zero_levels(g: &mut Graph, size: usize, nc: usize, bins: usize) -> Vec<HeadLevel> {
    [8, 16, 32]
        .iter()
        .map(|s| {
            let n = size / s;
            HeadLevel { cls: g.leaf(Tensor::zeros(&[1, nc, n, n])), reg: g.leaf(Tensor::zeros(&[1, 4 * bins, n, n])) }
        })
        .collect()
}

#[test]
fn loss_on_an_empty_image_is_closed_form_bce() {
    let mut g = Graph::new();
    let levels = zero_levels(&mut g, 64, 3, 17);
    let w = LossWeights::default();
    let out = total_loss(&mut g, &levels, &[vec![]], 64, &[8, 16, 32], &w).unwrap();
    let cells = (64 + 16 + 4) as f64;
    let want = w.cls_weight * 3.0 * cells * std::f64::consts::LN_2;
    assert!((out.components.total - want).abs() < 1e-10);
    assert_eq!(out.components.box_loss, 0.0);
    assert_eq!(out.components.dfl, 0.0);
    assert_eq!(out.components.num_pos, 0);
}

#[test]
fn loss_components_sum_and_gradients() {
    let mut rng = seeded(12);
    let targets = vec![vec![DetectionBox::new(1, 1.0, 0.4, 0.55, 0.3, 0.25), DetectionBox::new(0, 1.0, 0.8, 0.2, 0.1, 0.12)]];
    let w = LossWeights::default();
    let inputs: Vec<Tensor> = [8usize, 4, 2]
        .iter()
        .flat_map(|&n| [Tensor::randn(&[1, 3, n, n], &mut rng).scale(0.5), Tensor::randn(&[1, 68, n, n], &mut rng).scale(0.5)])
        .collect();
    let build = |g: &mut Graph, v: &[tcleaf_core::Var]| {
        let levels: Vec<HeadLevel> = v.chunks(2).map(|p| HeadLevel { cls: p[0], reg: p[1] }).collect();
        total_loss(g, &levels, &targets, 64, &[8, 16, 32], &w)
    };

    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let c = build(&mut g, &vars).unwrap().components;
    assert!(c.num_pos > 0);
    let sum = w.box_weight * c.box_loss + w.dfl_weight * c.dfl + w.cls_weight * c.cls;
    assert!((c.total - sum).abs() < 1e-12);
    assert!((0.0..2.0).contains(&c.box_loss));

    let r = grad_check(|g, v| Ok(build(g, v)?.total), &inputs, GradCheckConfig::default()).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
