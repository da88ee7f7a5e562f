//! Named finite-difference checks: one per differentiable op, plus the
//! full toy detector loss with respect to its parameters.
//!
//! Every op check runs on five random shapes. The op output is reduced to a
//! scalar with fixed random weights so that ops whose plain sum is constant
//! (softmax, batch norm) still get a meaningful gradient.

use rand::{Rng, SeedableRng};
use rand::seq::index::sample;

use tcleaf_core::attention::{efficient_attention_graph, exact_attention_graph};
use tcleaf_core::config::ModelConfig;
use tcleaf_core::error::Result;
use tcleaf_core::gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
use tcleaf_core::graph::{Graph, Var};
use tcleaf_core::loss::ciou_graph;
use tcleaf_core::model::{batch_images, Detector};
use tcleaf_core::nn::{Ctx, Mode, ParamStore};
use tcleaf_core::ops::ConvSpec;
use tcleaf_core::rng::{derive, seeded, Rng64};
use tcleaf_core::synth::{synth_scene, SynthSceneConfig};
use tcleaf_core::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const MIN_COORDS: usize = 64;
const TRIALS: usize = 5;

pub const OP_CHECKS: &[&str] = &[
    "add", "sub", "mul", "div", "maximum", "minimum", "affine", "exp", "log", "relu", "sigmoid", "silu", "atan", "sqrt",
    "square", "clamp", "sum", "mean", "sum_axis", "max_axis", "softmax", "log_softmax", "reshape", "transpose_last",
    "concat", "slice", "index_select", "matmul", "conv2d", "deform_conv2d", "max_pool", "global_avg_pool",
    "bilinear_resize", "batch_norm", "batch_norm_eval", "bce_with_logits", "efficient_attention", "exact_attention",
    "ciou",
];

pub const END_TO_END: &str = "detector";

/// Tape gradient that ignores half of the product rule, used to confirm the
/// suite can fail.
pub const NEGATIVE_CONTROL: &str = "negative_control";

pub fn all_checks() -> Vec<&'static str> {
    let mut v = OP_CHECKS.to_vec();
    v.push(END_TO_END);
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.coords >= MIN_COORDS
    }
}

type Gen = fn(&mut Rng64, usize) -> Vec<Tensor>;
type Body = fn(&mut Graph, &[Var], usize) -> Result<Var>;

fn normal(shape: &[usize], rng: &mut Rng64) -> Tensor {
    Tensor::randn(shape, rng)
}

fn positive(shape: &[usize], rng: &mut Rng64) -> Tensor {
    Tensor::rand_uniform(shape, 0.5, 2.0, rng)
}

/// Random shape of the given rank with extents in `lo..=hi`.
fn dims(rng: &mut Rng64, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(lo..=hi)).collect()
}

/// `sum(y * R)` with `R` fixed by the shape of `y`.
fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let seed = shape.iter().fold(17u64, |a, &d| derive(a, d as u64));
    let r = Tensor::randn(&shape, &mut seeded(seed));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn run_op(name: &str, gen: Gen, body: Body, seed: u64) -> Result<CheckRow> {
    let mut rng = seeded(derive(seed, name.len() as u64 * 131 + name.bytes().map(u64::from).sum::<u64>()));
    let mut row = CheckRow { name: name.into(), max_rel_error: 0.0, coords: 0 };
    for t in 0..TRIALS {
        let inputs = gen(&mut rng, t);
        let cfg = GradCheckConfig { eps: 1e-5, samples: MIN_COORDS, seed: derive(seed, t as u64) };
        let r: GradCheckReport = grad_check(
            |g, v| {
                let y = body(g, v, t)?;
                weighted_sum(g, y)
            },
            &inputs,
            cfg,
        )?;
        row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
        row.coords += r.coords_checked;
    }
    Ok(row)
}

fn pair(rng: &mut Rng64, t: usize) -> Vec<Tensor> {
    let a = dims(rng, 3, 2, 5);
    let mut b = a.clone();
    // Every other trial broadcasts the second operand along axis 1.
    if t % 2 == 1 {
        b[1] = 1;
    }
    vec![normal(&a, rng), normal(&b, rng)]
}

fn one(rng: &mut Rng64, _t: usize) -> Vec<Tensor> {
    let s = dims(rng, 3, 2, 6);
    vec![normal(&s, rng)]
}

fn one_positive(rng: &mut Rng64, _t: usize) -> Vec<Tensor> {
    let s = dims(rng, 3, 2, 6);
    vec![positive(&s, rng)]
}

fn image(rng: &mut Rng64, _t: usize) -> Vec<Tensor> {
    let s = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(4..=7), rng.random_range(4..=7)];
    vec![normal(&s, rng)]
}

fn unary(g: &mut Graph, v: &[Var], op: fn(&mut Graph, Var) -> Var) -> Result<Var> {
    Ok(op(g, v[0]))
}

fn conv_spec(t: usize) -> ConvSpec {
    match t {
        0 => ConvSpec::same(3),
        1 => ConvSpec::new(3).stride(2).padding(1),
        2 => ConvSpec::new(3).dilation(2).padding(2),
        3 => ConvSpec::new(1),
        _ => ConvSpec::same(3).groups(2),
    }
}

fn conv_inputs(rng: &mut Rng64, t: usize) -> Vec<Tensor> {
    let spec = conv_spec(t);
    let (cin, cout) = if spec.groups == 2 { (4, 4) } else { (rng.random_range(1..=3), rng.random_range(1..=3)) };
    let (h, w) = (rng.random_range(5..=7), rng.random_range(5..=7));
    vec![
        normal(&[2, cin, h, w], rng),
        normal(&[cout, cin / spec.groups, spec.kernel_h, spec.kernel_w], rng),
        normal(&[cout], rng),
    ]
}

fn deform_spec(t: usize) -> ConvSpec {
    match t % 3 {
        0 => ConvSpec::same(3),
        1 => ConvSpec::new(3).stride(2).padding(1),
        _ => ConvSpec::same(1),
    }
}

fn deform_inputs(rng: &mut Rng64, t: usize) -> Vec<Tensor> {
    let spec = deform_spec(t);
    let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(4..=6), rng.random_range(4..=6));
    let (ho, wo) = spec.output_hw("gradsuite", h, w).expect("valid geometry");
    let taps = spec.kernel_h * spec.kernel_w;
    vec![
        normal(&[1, cin, h, w], rng),
        normal(&[1, 2 * taps, ho, wo], rng).scale(1.5),
        normal(&[cout, cin, spec.kernel_h, spec.kernel_w], rng),
        normal(&[cout], rng),
    ]
}

fn bn_inputs(rng: &mut Rng64, _t: usize) -> Vec<Tensor> {
    let c = rng.random_range(1..=3);
    let s = [rng.random_range(2..=3), c, rng.random_range(2..=4), rng.random_range(2..=4)];
    vec![normal(&s, rng), positive(&[c], rng), normal(&[c], rng), normal(&[c], rng), positive(&[c], rng)]
}

fn qkv_inputs(rng: &mut Rng64, _t: usize) -> Vec<Tensor> {
    let (h, l, d) = (rng.random_range(1..=2), rng.random_range(3..=6), rng.random_range(2..=4));
    (0..3).map(|_| normal(&[h, l, d], rng).scale(0.5)).collect()
}

fn box_inputs(rng: &mut Rng64, _t: usize) -> Vec<Tensor> {
    let p = rng.random_range(3..=6);
    let mut cols = Vec::with_capacity(4);
    let xy1 = Tensor::rand_uniform(&[2, p, 1], 0.0, 4.0, rng);
    let wh = Tensor::rand_uniform(&[2, p, 1], 0.5, 4.0, rng);
    for k in 0..2 {
        cols.push(xy1.slice(0, k, 1).unwrap().reshape(&[p, 1]).unwrap());
    }
    for k in 0..2 {
        let lo = xy1.slice(0, k, 1).unwrap();
        let hi = lo.zip_map(&wh.slice(0, k, 1).unwrap(), |a, b| a + b).unwrap();
        cols.push(hi.reshape(&[p, 1]).unwrap());
    }
    // x1, y1, x2, y2
    cols
}

fn op_entry(name: &str) -> Option<(Gen, Body)> {
    let e: (Gen, Body) = match name {
        "add" => (pair, |g, v, _| g.add(v[0], v[1])),
        "sub" => (pair, |g, v, _| g.sub(v[0], v[1])),
        "mul" => (pair, |g, v, _| g.mul(v[0], v[1])),
        "div" => (
            |rng, t| {
                let mut p = pair(rng, t);
                p[1] = positive(p[1].shape(), rng);
                p
            },
            |g, v, _| g.div(v[0], v[1]),
        ),
        "maximum" => (pair, |g, v, _| g.maximum(v[0], v[1])),
        "minimum" => (pair, |g, v, _| g.minimum(v[0], v[1])),
        "affine" => (one, |g, v, _| {
            let a = g.affine(v[0], 1.5, -0.25);
            let b = g.scale(a, -2.0);
            let c = g.add_scalar(b, 0.5);
            Ok(g.neg(c))
        }),
        "exp" => (one, |g, v, _| unary(g, v, Graph::exp)),
        "log" => (one_positive, |g, v, _| unary(g, v, Graph::log)),
        "relu" => (one, |g, v, _| unary(g, v, Graph::relu)),
        "sigmoid" => (one, |g, v, _| unary(g, v, Graph::sigmoid)),
        "silu" => (one, |g, v, _| unary(g, v, Graph::silu)),
        "atan" => (one, |g, v, _| unary(g, v, Graph::atan)),
        "sqrt" => (one_positive, |g, v, _| unary(g, v, Graph::sqrt)),
        "square" => (one, |g, v, _| unary(g, v, Graph::square)),
        "clamp" => (one, |g, v, _| {
            let a = g.clamp(v[0], -0.7, 0.9);
            let b = g.clamp_min(v[0], 0.2);
            g.add(a, b)
        }),
        "sum" => (one, |g, v, _| {
            let s = g.sum(v[0]);
            Ok(g.square(s))
        }),
        "mean" => (one, |g, v, _| {
            let s = g.mean(v[0]);
            Ok(g.square(s))
        }),
        "sum_axis" => (one, |g, v, t| g.sum_axis(v[0], t % 3)),
        "max_axis" => (one, |g, v, t| g.max_axis(v[0], t % 3)),
        "softmax" => (one, |g, v, t| g.softmax(v[0], t % 3)),
        "log_softmax" => (one, |g, v, t| g.log_softmax(v[0], t % 3)),
        "reshape" => (one, |g, v, _| {
            let n = g.shape(v[0]).iter().product::<usize>();
            g.reshape(v[0], &[n])
        }),
        "transpose_last" => (one, |g, v, _| g.transpose_last(v[0])),
        "concat" => (
            |rng, t| {
                let mut a = dims(rng, 3, 2, 4);
                let b_len = rng.random_range(1..=3);
                let axis = t % 3;
                let x = normal(&a, rng);
                a[axis] = b_len;
                vec![x, normal(&a, rng)]
            },
            |g, v, t| g.concat(&[v[0], v[1]], t % 3),
        ),
        "slice" => (one, |g, v, t| {
            let axis = t % 3;
            let n = g.shape(v[0])[axis];
            g.slice(v[0], axis, 1, n - 1)
        }),
        "index_select" => (one, |g, v, _| {
            let n = g.shape(v[0])[0];
            let rows: Vec<usize> = (0..2 * n).map(|i| (i * 7 + 1) % n).collect();
            g.index_select(v[0], &rows)
        }),
        "matmul" => (
            |rng, t| {
                let (m, k, n) = (rng.random_range(2..=5), rng.random_range(2..=5), rng.random_range(2..=5));
                if t % 2 == 0 {
                    vec![normal(&[m, k], rng), normal(&[k, n], rng)]
                } else {
                    vec![normal(&[2, m, k], rng), normal(&[2, k, n], rng)]
                }
            },
            |g, v, _| g.matmul(v[0], v[1]),
        ),
        "conv2d" => (conv_inputs, |g, v, t| g.conv2d(v[0], v[1], Some(v[2]), conv_spec(t))),
        "deform_conv2d" => (deform_inputs, |g, v, t| g.deform_conv2d(v[0], v[1], v[2], Some(v[3]), deform_spec(t))),
        "max_pool" => (image, |g, v, t| {
            let spec = if t % 2 == 0 { ConvSpec::new(3).stride(2).padding(1) } else { ConvSpec::same(5) };
            g.max_pool(v[0], spec)
        }),
        "global_avg_pool" => (image, |g, v, _| g.global_avg_pool(v[0])),
        "bilinear_resize" => (image, |g, v, t| {
            let s = g.shape(v[0]).to_vec();
            let (h, w) = if t % 2 == 0 { (2 * s[2] + 1, s[3] + 3) } else { (s[2] / 2, s[3].div_ceil(2)) };
            g.bilinear_resize(v[0], h, w)
        }),
        "batch_norm" => (
            |rng, t| bn_inputs(rng, t)[..3].to_vec(),
            |g, v, _| g.batch_norm(v[0], v[1], v[2], 1e-5),
        ),
        "batch_norm_eval" => (bn_inputs, |g, v, _| g.batch_norm_eval(v[0], v[1], v[2], v[3], v[4], 1e-5)),
        "bce_with_logits" => (one, |g, v, _| {
            let s = g.shape(v[0]).to_vec();
            let t = Tensor::rand_uniform(&s, 0.0, 1.0, &mut seeded(5));
            let t = g.constant(t);
            g.bce_with_logits(v[0], t)
        }),
        "efficient_attention" => (qkv_inputs, |g, v, _| {
            let d = g.shape(v[0])[2];
            let p = Tensor::randn(&[d, 8], &mut seeded(d as u64)).scale(1.0 / (d as f64).sqrt());
            let p = g.constant(p);
            efficient_attention_graph(g, v[0], v[1], v[2], p)
        }),
        "exact_attention" => (qkv_inputs, |g, v, _| exact_attention_graph(g, v[0], v[1], v[2])),
        "ciou" => (box_inputs, |g, v, _| {
            let p = g.shape(v[0])[0];
            let mut rng = seeded(p as u64);
            let mut tgt = [v[0]; 4];
            let xy = Tensor::rand_uniform(&[2, p, 1], 0.0, 4.0, &mut rng);
            let wh = Tensor::rand_uniform(&[2, p, 1], 0.5, 4.0, &mut rng);
            for k in 0..2 {
                let lo = xy.slice(0, k, 1)?.reshape(&[p, 1])?;
                let hi = lo.zip_map(&wh.slice(0, k, 1)?.reshape(&[p, 1])?, |a, b| a + b)?;
                tgt[k] = g.constant(lo);
                tgt[k + 2] = g.constant(hi);
            }
            ciou_graph(g, [v[0], v[1], v[2], v[3]], tgt)
        }),
        NEGATIVE_CONTROL => (one, |g, v, _| {
            let d = g.detach(v[0]);
            g.mul(v[0], d)
        }),
        _ => return None,
    };
    Some(e)
}

fn toy_batch(size: usize, n: u64) -> Vec<tcleaf_core::synth::AnnotatedImage> {
    (0..n).map(|i| synth_scene(&SynthSceneConfig { size, ..SynthSceneConfig::toy(700 + i) }).sample).collect()
}

fn detector_loss(det: &Detector, store: &ParamStore, images: &Tensor, targets: &[Vec<tcleaf_core::boxes::DetectionBox>]) -> Result<f64> {
    let mut ctx = Ctx::new(store, Mode::Train, det.cfg.bn);
    let x = ctx.input(images.clone());
    let out = det.forward(&mut ctx, x)?;
    let loss = det.loss(&mut ctx, &out, targets)?;
    Ok(ctx.graph.value(loss.objective).item())
}

/// Loss of the reduced-width detector on two synthetic 128x128 scenes,
/// differentiated with respect to `MIN_COORDS` randomly drawn trainable
/// parameter coordinates.
pub fn end_to_end(seed: u64) -> Result<CheckRow> {
    let mut cfg = ModelConfig::toy();
    cfg.image_size = 128;
    let (det, mut store) = Detector::new(&cfg, seed)?;
    let samples = toy_batch(128, 2);
    let images = batch_images(&samples.iter().collect::<Vec<_>>())?;
    let targets: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();

    let mut ctx = Ctx::new(&store, Mode::Train, cfg.bn);
    let x = ctx.input(images.clone());
    let out = det.forward(&mut ctx, x)?;
    let loss = det.loss(&mut ctx, &out, &targets)?;
    let mut grads = ctx.graph.backward(loss.objective)?;
    let grads = ctx.param_grads(&mut grads);
    drop(ctx);

    let sizes: Vec<usize> = grads.iter().map(|(_, g)| g.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = Rng64::seed_from_u64(derive(seed, 99));
    let eps = 1e-6;
    let mut row = CheckRow { name: END_TO_END.into(), max_rel_error: 0.0, coords: 0 };
    for flat in sample(&mut rng, total, MIN_COORDS).into_vec() {
        let (mut k, mut c) = (0, flat);
        while c >= sizes[k] {
            c -= sizes[k];
            k += 1;
        }
        let (id, g) = &grads[k];
        let x0 = store.get(*id).data()[c];
        store.get_mut(*id).data_mut()[c] = x0 + eps;
        let fp = detector_loss(&det, &store, &images, &targets)?;
        store.get_mut(*id).data_mut()[c] = x0 - eps;
        let fm = detector_loss(&det, &store, &images, &targets)?;
        store.get_mut(*id).data_mut()[c] = x0;
        let err = relative_error(g.data()[c], (fp - fm) / (2.0 * eps));
        row.max_rel_error = row.max_rel_error.max(err);
        row.coords += 1;
    }
    Ok(row)
}

pub fn run_check(name: &str, seed: u64) -> Option<Result<CheckRow>> {
    if name == END_TO_END {
        return Some(end_to_end(seed));
    }
    let (gen, body) = op_entry(name)?;
    Some(run_op(name, gen, body, seed))
}
