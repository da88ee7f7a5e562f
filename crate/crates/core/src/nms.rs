//! Class-wise greedy non-maximum suppression.

use alloc::vec::Vec;

use crate::boxes::{iou, DetectionBox};
use crate::config::PostprocessConfig;

/// Candidate indices above the score threshold, best first; equal scores keep
/// input order.
pub fn ranked(candidates: &[DetectionBox], score_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].score > score_threshold).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score).then(a.cmp(&b)));
    order
}

/// Indices of the kept candidates in output order.
pub fn nms_indices(candidates: &[DetectionBox], cfg: &PostprocessConfig) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in ranked(candidates, cfg.score_threshold) {
        if kept.len() == cfg.max_det {
            break;
        }
        let c = &candidates[i];
        let suppressed = kept
            .iter()
            .any(|&k| candidates[k].class_id == c.class_id && iou(&candidates[k], c) > cfg.iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(candidates: &[DetectionBox], cfg: &PostprocessConfig) -> Vec<DetectionBox> {
    nms_indices(candidates, cfg).into_iter().map(|i| candidates[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn cfg() -> PostprocessConfig {
        PostprocessConfig::default()
    }

    #[test]
    fn single_box_survives() {
        let b = DetectionBox::new(0, 0.9, 0.5, 0.5, 0.2, 0.2);
        assert_eq!(nms(&[b], &cfg()), alloc::vec![b]);
    }

    #[test]
    fn overlapping_pair_keeps_higher() {
        let a = DetectionBox::new(1, 0.9, 0.5, 0.5, 0.2, 0.2);
        let b = DetectionBox::new(1, 0.8, 0.5, 0.5, 0.2, 0.2 * 0.9);
        assert!(iou(&a, &b) > 0.85);
        assert_eq!(nms(&[b, a], &cfg()), alloc::vec![a]);
        let other = DetectionBox { class_id: 2, ..b };
        assert_eq!(nms(&[other, a], &cfg()).len(), 2);
    }

    /// The greedy output is the unique subset `S` of eligible boxes in which a
    /// box belongs to `S` exactly when no better-ranked member of `S` of its
    /// class overlaps it above the threshold.
    fn exhaustive(c: &[DetectionBox], p: &PostprocessConfig) -> Vec<usize> {
        let order = ranked(c, p.score_threshold);
        let rank = |i: usize| order.iter().position(|&o| o == i).unwrap();
        let mut found = Vec::new();
        for mask in 0u32..(1 << order.len()) {
            let members: Vec<usize> = (0..order.len()).filter(|b| mask >> b & 1 == 1).map(|b| order[b]).collect();
            let consistent = order.iter().all(|&i| {
                let beaten = members
                    .iter()
                    .any(|&s| rank(s) < rank(i) && c[s].class_id == c[i].class_id && iou(&c[s], &c[i]) > p.iou_threshold);
                members.contains(&i) != beaten
            });
            if consistent {
                found.push(members);
            }
        }
        assert_eq!(found.len(), 1);
        let mut s = found.pop().unwrap();
        s.sort_by_key(|&i| rank(i));
        s
    }

    #[test]
    fn matches_exhaustive_reference() {
        let mut rng = seeded(77);
        let p = PostprocessConfig { iou_threshold: 0.5, score_threshold: 0.25, max_det: 300 };
        for _ in 0..1000 {
            let n = rng.random_range(0..=10);
            let boxes: Vec<DetectionBox> = (0..n)
                .map(|_| {
                    let score = (rng.random_range(0..20) as f64) / 20.0;
                    DetectionBox::new(
                        rng.random_range(0..2),
                        score,
                        rng.random_range(0.3..0.7),
                        rng.random_range(0.3..0.7),
                        rng.random_range(0.05..0.4),
                        rng.random_range(0.05..0.4),
                    )
                })
                .collect();
            let kept = nms_indices(&boxes, &p);
            assert_eq!(kept, exhaustive(&boxes, &p));
            for (a, &i) in kept.iter().enumerate() {
                for &j in &kept[a + 1..] {
                    assert!(boxes[i].class_id != boxes[j].class_id || iou(&boxes[i], &boxes[j]) <= p.iou_threshold);
                }
            }
        }
    }

    #[test]
    fn max_det_truncates() {
        let boxes: Vec<DetectionBox> = (0..5).map(|i| DetectionBox::new(0, 0.9, 0.1 + 0.2 * i as f64, 0.5, 0.1, 0.1)).collect();
        let p = PostprocessConfig { max_det: 3, ..cfg() };
        assert_eq!(nms_indices(&boxes, &p), alloc::vec![0, 1, 2]);
    }
}
