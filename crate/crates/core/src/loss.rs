//! Detection objective: CIoU box loss, distribution focal loss and
//! per-class binary cross-entropy.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::assign::{assign_targets, Positive};
use crate::boxes::DetectionBox;
use crate::config::LossWeights;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::head::HeadLevel;
use crate::math;
use crate::tensor::Tensor;

pub const CIOU_EPS: f64 = 1e-7;

/// Complete IoU of `pred` against `target`, both `[x1, y1, x2, y2]`.
pub fn ciou(pred: [f64; 4], target: [f64; 4]) -> Result<f64> {
    let (w1, h1) = (pred[2] - pred[0], pred[3] - pred[1]);
    let (w2, h2) = (target[2] - target[0], target[3] - target[1]);
    if !(w1 > 0.0 && h1 > 0.0 && w2 > 0.0 && h2 > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("ciou needs positive extents, got {pred:?} and {target:?}")));
    }
    let iw = (pred[2].min(target[2]) - pred[0].max(target[0])).max(0.0);
    let ih = (pred[3].min(target[3]) - pred[1].max(target[1])).max(0.0);
    let inter = iw * ih;
    let union = w1 * h1 + w2 * h2 - inter + CIOU_EPS;
    let iou = inter / union;
    let cw = pred[2].max(target[2]) - pred[0].min(target[0]);
    let ch = pred[3].max(target[3]) - pred[1].min(target[1]);
    let c2 = cw * cw + ch * ch + CIOU_EPS;
    let dx = target[0] + target[2] - pred[0] - pred[2];
    let dy = target[1] + target[3] - pred[1] - pred[3];
    let rho2 = (dx * dx + dy * dy) / 4.0;
    let da = math::atan(w2 / h2) - math::atan(w1 / h1);
    let v = 4.0 / (PI * PI) * da * da;
    let alpha = v / (v - iou + 1.0 + CIOU_EPS);
    Ok(iou - rho2 / c2 - alpha * v)
}

/// Two-bin cross-entropy of a side distribution (given as logits) against a
/// continuous target in bin units.
pub fn dfl_loss(logits: &[f64], target: f64) -> Result<f64> {
    let reg_max = logits.len() - 1;
    if !(0.0..=reg_max as f64).contains(&target) {
        return Err(Error::InvalidArgument(alloc::format!("dfl target {target} outside [0, {reg_max}]")));
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + math::ln(logits.iter().map(|l| math::exp(l - mx)).sum());
    let k = (math::floor(target) as usize).min(reg_max.saturating_sub(1));
    let wl = (k + 1) as f64 - target;
    let wr = target - k as f64;
    let right = if k < reg_max { wr * (lse - logits[k + 1]) } else { 0.0 };
    Ok(wl * (lse - logits[k]) + right)
}

/// CIoU on `[P, 1]` corner columns; the target columns are constants.
pub fn ciou_graph(g: &mut Graph, pred: [Var; 4], target: [Var; 4]) -> Result<Var> {
    let [x1, y1, x2, y2] = pred;
    let [tx1, ty1, tx2, ty2] = target;
    let w1 = g.sub(x2, x1)?;
    let h1 = g.sub(y2, y1)?;
    let w2 = g.sub(tx2, tx1)?;
    let h2 = g.sub(ty2, ty1)?;
    let ix2 = g.minimum(x2, tx2)?;
    let ix1 = g.maximum(x1, tx1)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.clamp_min(iw, 0.0);
    let iy2 = g.minimum(y2, ty2)?;
    let iy1 = g.maximum(y1, ty1)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.clamp_min(ih, 0.0);
    let inter = g.mul(iw, ih)?;
    let a1 = g.mul(w1, h1)?;
    let a2 = g.mul(w2, h2)?;
    let union = g.add(a1, a2)?;
    let union = g.sub(union, inter)?;
    let union = g.add_scalar(union, CIOU_EPS);
    let iou = g.div(inter, union)?;

    let ex2 = g.maximum(x2, tx2)?;
    let ex1 = g.minimum(x1, tx1)?;
    let cw = g.sub(ex2, ex1)?;
    let ey2 = g.maximum(y2, ty2)?;
    let ey1 = g.minimum(y1, ty1)?;
    let ch = g.sub(ey2, ey1)?;
    let cw2 = g.square(cw);
    let ch2 = g.square(ch);
    let c2 = g.add(cw2, ch2)?;
    let c2 = g.add_scalar(c2, CIOU_EPS);

    let ts = g.add(tx1, tx2)?;
    let ps = g.add(x1, x2)?;
    let dx = g.sub(ts, ps)?;
    let ts = g.add(ty1, ty2)?;
    let ps = g.add(y1, y2)?;
    let dy = g.sub(ts, ps)?;
    let dx2 = g.square(dx);
    let dy2 = g.square(dy);
    let rho2 = g.add(dx2, dy2)?;
    let rho2 = g.scale(rho2, 0.25);
    let dist = g.div(rho2, c2)?;

    let rt = g.div(w2, h2)?;
    let at = g.atan(rt);
    let rp = g.div(w1, h1)?;
    let ap = g.atan(rp);
    let da = g.sub(at, ap)?;
    let v = g.square(da);
    let v = g.scale(v, 4.0 / (PI * PI));
    let den = g.sub(v, iou)?;
    let den = g.add_scalar(den, 1.0 + CIOU_EPS);
    let alpha = g.div(v, den)?;
    let av = g.mul(alpha, v)?;

    let out = g.sub(iou, dist)?;
    g.sub(out, av)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub box_loss: f64,
    pub dfl: f64,
    pub cls: f64,
    /// Weighted sum of the three terms.
    pub total: f64,
    pub num_pos: usize,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// `total` times the batch size; this is what the optimiser descends.
    pub objective: Var,
    pub total: Var,
    pub box_loss: Option<Var>,
    pub dfl: Option<Var>,
    pub cls: Var,
    pub components: LossComponents,
    pub positives: Vec<(usize, Positive)>,
}

/// Positives of every image, tagged with the batch index.
pub fn assign_batch(targets: &[Vec<DetectionBox>], image_size: usize, strides: &[usize; 3]) -> Vec<(usize, Positive)> {
    targets
        .iter()
        .enumerate()
        .flat_map(|(n, gts)| assign_targets(gts, image_size, strides).into_iter().map(move |p| (n, p)))
        .collect()
}

/// Builds the full objective over the head outputs of one batch.
///
/// Classification is summed binary cross-entropy over every cell and class,
/// normalised by the number of positives (at least one); the box and
/// distribution terms are averaged over positives and vanish without any.
pub fn total_loss(
    g: &mut Graph,
    levels: &[HeadLevel],
    targets: &[Vec<DetectionBox>],
    image_size: usize,
    strides: &[usize; 3],
    weights: &LossWeights,
) -> Result<LossOutput> {
    if levels.len() != 3 {
        return Err(shape_err("total_loss", alloc::format!("expected 3 levels, got {}", levels.len())));
    }
    let n = g.shape(levels[0].cls)[0];
    let nc = g.shape(levels[0].cls)[1];
    let rc = g.shape(levels[0].reg)[1];
    if targets.len() != n || !rc.is_multiple_of(4) {
        return Err(shape_err("total_loss", alloc::format!("{} target lists for batch {n}, {rc} reg channels", targets.len())));
    }
    for (i, l) in levels.iter().enumerate() {
        let want = image_size / strides[i];
        let s = g.shape(l.cls);
        if s[2] != want || s[3] != want || g.shape(l.reg)[2..] != s[2..] {
            return Err(shape_err("total_loss", alloc::format!("level {i} grid {s:?} does not match stride {}", strides[i])));
        }
    }
    let bins = rc / 4;
    let reg_max = bins - 1;

    let mut cls_parts = Vec::with_capacity(3);
    let mut reg_parts = Vec::with_capacity(3);
    let mut anchors = 0;
    for l in levels {
        let s = g.shape(l.cls).to_vec();
        let hw = s[2] * s[3];
        anchors += hw;
        cls_parts.push(g.reshape(l.cls, &[n, nc, hw])?);
        reg_parts.push(g.reshape(l.reg, &[n, rc, hw])?);
    }
    let cls = g.concat(&cls_parts, 2)?;
    let positives = assign_batch(targets, image_size, strides);
    for (_, p) in &positives {
        if p.class_id >= nc {
            return Err(Error::InvalidArgument(alloc::format!("class {} with {nc} classes", p.class_id)));
        }
    }
    let np = positives.len();
    let norm = np.max(1) as f64;

    let mut cls_t = Tensor::zeros(&[n, nc, anchors]);
    for (b, p) in &positives {
        cls_t.data_mut()[(b * nc + p.class_id) * anchors + p.anchor] = 1.0;
    }
    let cls_t = g.constant(cls_t);
    let bce = g.bce_with_logits(cls, cls_t)?;
    let bce = g.sum(bce);
    let l_cls = g.scale(bce, 1.0 / norm);

    let (l_box, l_dfl) = if np == 0 {
        (None, None)
    } else {
        let reg = g.concat(&reg_parts, 2)?;
        let reg = g.transpose_last(reg)?;
        let reg = g.reshape(reg, &[n * anchors, rc])?;
        let rows: Vec<usize> = positives.iter().map(|(b, p)| b * anchors + p.anchor).collect();
        let reg = g.index_select(reg, &rows)?;
        let reg = g.reshape(reg, &[np, 4, bins])?;
        let logp = g.log_softmax(reg, 2)?;

        let mut wts = Tensor::zeros(&[np, 4, bins]);
        let mut tgt = [Tensor::zeros(&[np, 1]), Tensor::zeros(&[np, 1]), Tensor::zeros(&[np, 1]), Tensor::zeros(&[np, 1])];
        let hi = reg_max as f64 - 0.01;
        for (i, (_, p)) in positives.iter().enumerate() {
            let s = p.stride as f64;
            let [ax, ay] = p.anchor_xy;
            let [x1, y1, x2, y2] = p.target;
            let rel = [(x1 - ax) / s, (y1 - ay) / s, (x2 - ax) / s, (y2 - ay) / s];
            for (k, t) in tgt.iter_mut().enumerate() {
                t.data_mut()[i] = rel[k];
            }
            let sides = [-rel[0], -rel[1], rel[2], rel[3]];
            for (k, side) in sides.iter().enumerate() {
                let t = side.clamp(0.0, hi);
                let lo = math::floor(t) as usize;
                let base = (i * 4 + k) * bins;
                wts.data_mut()[base + lo] = (lo + 1) as f64 - t;
                wts.data_mut()[base + lo + 1] = t - lo as f64;
            }
        }
        let wts = g.constant(wts);
        let wl = g.mul(logp, wts)?;
        let wl = g.sum(wl);
        let l_dfl = g.scale(wl, -1.0 / (4.0 * np as f64));

        let probs = g.exp(logp);
        let bin_idx = g.constant(Tensor::from_fn(&[bins, 1], |i| i as f64));
        let sides = g.matmul(probs, bin_idx)?;
        let sides = g.reshape(sides, &[np, 4])?;
        let mut side = [sides; 4];
        for (k, s) in side.iter_mut().enumerate() {
            *s = g.slice(sides, 1, k, 1)?;
        }
        let pred = [g.neg(side[0]), g.neg(side[1]), side[2], side[3]];
        let [t0, t1, t2, t3] = tgt;
        let target = [g.constant(t0), g.constant(t1), g.constant(t2), g.constant(t3)];
        let c = ciou_graph(g, pred, target)?;
        let c = g.sum(c);
        let l_box = g.affine(c, -1.0 / np as f64, 1.0);
        (Some(l_box), Some(l_dfl))
    };

    let mut total = g.scale(l_cls, weights.cls_weight);
    if let (Some(b), Some(d)) = (l_box, l_dfl) {
        let wb = g.scale(b, weights.box_weight);
        let wd = g.scale(d, weights.dfl_weight);
        total = g.add(total, wb)?;
        total = g.add(total, wd)?;
    }
    let objective = g.scale(total, n as f64);
    let item = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let components = LossComponents {
        box_loss: item(g, l_box),
        dfl: item(g, l_dfl),
        cls: g.value(l_cls).item(),
        total: g.value(total).item(),
        num_pos: np,
    };
    Ok(LossOutput { objective, total, box_loss: l_box, dfl: l_dfl, cls: l_cls, components, positives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn literal_ciou(b: [f64; 4], t: [f64; 4]) -> f64 {
        let inter_w = f64::max(0.0, f64::min(b[2], t[2]) - f64::max(b[0], t[0]));
        let inter_h = f64::max(0.0, f64::min(b[3], t[3]) - f64::max(b[1], t[1]));
        let i = inter_w * inter_h;
        let u = (b[2] - b[0]) * (b[3] - b[1]) + (t[2] - t[0]) * (t[3] - t[1]) - i;
        let iou = i / (u + 1e-7);
        let (bcx, bcy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
        let (tcx, tcy) = ((t[0] + t[2]) / 2.0, (t[1] + t[3]) / 2.0);
        let rho2 = (bcx - tcx).powi(2) + (bcy - tcy).powi(2);
        let c2 = (f64::max(b[2], t[2]) - f64::min(b[0], t[0])).powi(2)
            + (f64::max(b[3], t[3]) - f64::min(b[1], t[1])).powi(2);
        let v = 4.0 / (PI * PI) * (((t[2] - t[0]) / (t[3] - t[1])).atan() - ((b[2] - b[0]) / (b[3] - b[1])).atan()).powi(2);
        let alpha = v / ((1.0 - iou) + v + 1e-7);
        iou - rho2 / (c2 + 1e-7) - alpha * v
    }

    fn random_box(rng: &mut crate::rng::Rng64) -> [f64; 4] {
        let x: f64 = rng.random_range(0.0..10.0);
        let y: f64 = rng.random_range(0.0..10.0);
        [x, y, x + rng.random_range(0.1..5.0), y + rng.random_range(0.1..5.0)]
    }

    #[test]
    fn ciou_identity_and_analytic_iou() {
        let b = [1.0, 2.0, 4.0, 3.5];
        assert!((ciou(b, b).unwrap() - 1.0).abs() < 1e-6);
        // Same aspect and no enclosing penalty beyond the centre term:
        // IoU 1/7, centres (1,1) and (2,2), enclosing diagonal^2 = 18.
        let c = ciou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]).unwrap();
        assert!((c - (1.0 / 7.0 - 2.0 / 18.0)).abs() < 1e-6);
        assert!(ciou([0.0, 0.0, 0.0, 1.0], b).is_err());
    }

    #[test]
    fn ciou_matches_literal_formula() {
        let mut rng = seeded(1);
        for _ in 0..500 {
            let (a, b) = (random_box(&mut rng), random_box(&mut rng));
            let c = ciou(a, b).unwrap();
            assert!((c - literal_ciou(a, b)).abs() < 1e-10);
            assert!(c > -1.0 && c <= 1.0);
        }
    }

    #[test]
    fn ciou_graph_matches_plain() {
        let mut rng = seeded(2);
        let boxes: Vec<([f64; 4], [f64; 4])> = (0..20).map(|_| (random_box(&mut rng), random_box(&mut rng))).collect();
        let mut g = Graph::new();
        let col = |g: &mut Graph, k: usize, pred: bool| {
            let v: Vec<f64> = boxes.iter().map(|(a, b)| if pred { a[k] } else { b[k] }).collect();
            g.leaf(Tensor::new(alloc::vec![20, 1], v).unwrap())
        };
        let p = [col(&mut g, 0, true), col(&mut g, 1, true), col(&mut g, 2, true), col(&mut g, 3, true)];
        let t = [col(&mut g, 0, false), col(&mut g, 1, false), col(&mut g, 2, false), col(&mut g, 3, false)];
        let c = ciou_graph(&mut g, p, t).unwrap();
        for (i, (a, b)) in boxes.iter().enumerate() {
            assert!((g.value(c).data()[i] - ciou(*a, *b).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn dfl_cases() {
        let mut one_hot = [-1e3; 17];
        one_hot[4] = 0.0;
        assert!(dfl_loss(&one_hot, 4.0).unwrap() < 1e-12);
        let mut split = [-1e3; 17];
        split[4] = 0.0;
        split[5] = 0.0;
        assert!((dfl_loss(&split, 4.5).unwrap() - math::ln(2.0)).abs() < 1e-12);
        assert!(dfl_loss(&split, 16.5).is_err());
        assert!(dfl_loss(&split, -0.1).is_err());

        let mut rng = seeded(4);
        for _ in 0..200 {
            let l: Vec<f64> = (0..17).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t: f64 = rng.random_range(0.0..16.0);
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            let k = t.floor() as usize;
            let lit = -((k + 1) as f64 - t) * (l[k].exp() / z).ln() - (t - k as f64) * (l[k + 1].exp() / z).ln();
            assert!((dfl_loss(&l, t).unwrap() - lit).abs() < 1e-12);
        }
    }
}
