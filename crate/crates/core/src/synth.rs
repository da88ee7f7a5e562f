//! Deterministic synthetic leaf scenes with three lesion archetypes.
//!
//! Class 0 is a small orange pustule with a dark core, class 1 an elongated
//! dark-brown streak, class 2 a large tan blotch ringed by a yellow halo.
//! Textured scenes add venation, low-frequency shading and unannotated
//! rectangular patches painted in lesion colours.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;

use crate::boxes::DetectionBox;
use crate::math;
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["rust", "others", "mid_late"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Flat,
    TexturedClutter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSceneConfig {
    pub size: usize,
    pub background: Background,
    /// Inclusive range of lesions per scene.
    pub lesion_count: (usize, usize),
    /// Inclusive range of the lesion radius in pixels; each archetype uses
    /// its own share of it.
    pub radius: (f64, f64),
    /// Inclusive range of distractor patches in textured scenes.
    pub distractors: (usize, usize),
    pub seed: u64,
}

impl SynthSceneConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            size: 256,
            background: Background::TexturedClutter,
            lesion_count: (2, 5),
            radius: (4.0, 28.0),
            distractors: (1, 3),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<DetectionBox>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub sample: AnnotatedImage,
    /// Per pixel, `1 + index` of the lesion painted there, 0 elsewhere.
    pub labels: Vec<u16>,
    /// Lesions that could not be placed within the retry budget.
    pub placement_failures: usize,
}

const PLACEMENT_RETRIES: usize = 60;

#[derive(Clone, Copy)]
struct Lesion {
    class_id: usize,
    cx: f64,
    cy: f64,
    /// Semi-axes and rotation for the streak; `a == b` for round lesions.
    a: f64,
    b: f64,
    theta: f64,
    /// Irregularity of the blotch outline.
    wobble: [f64; 3],
    phase: [f64; 3],
    colour: [f64; 3],
    core: [f64; 3],
}

impl Lesion {
    /// `Some(colour)` when `(x, y)` (pixel centre) belongs to the lesion.
    fn shade(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (libm::cos(self.theta), libm::sin(self.theta));
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = math::sqrt((u / self.a) * (u / self.a) + (v / self.b) * (v / self.b));
        let ang = libm::atan2(v, u);
        let edge = 1.0 + self.wobble.iter().zip(&self.phase).enumerate().map(|(k, (w, p))| w * libm::sin((k + 2) as f64 * ang + p)).sum::<f64>();
        if r > edge {
            return None;
        }
        let t = r / edge;
        Some(match self.class_id {
            0 => {
                if t < 0.45 {
                    self.core
                } else {
                    self.colour
                }
            }
            1 => mix(self.core, self.colour, t),
            _ => {
                if t > 0.75 {
                    self.core
                } else {
                    self.colour
                }
            }
        })
    }

    fn extent(&self) -> f64 {
        self.a.max(self.b) * (1.0 + self.wobble.iter().map(|w| w.abs()).sum::<f64>())
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn jitter(rng: &mut Rng64, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn draw_lesion(rng: &mut Rng64, cfg: &SynthSceneConfig) -> Lesion {
    let class_id = rng.random_range(0..NUM_CLASSES);
    let (lo, hi) = cfg.radius;
    let span = hi - lo;
    let pick = |rng: &mut Rng64, f0: f64, f1: f64| lo + span * rng.random_range(f0..=f1);
    let size = cfg.size as f64;
    let (a, b, wobble, colour, core) = match class_id {
        0 => {
            let r = pick(rng, 0.0, 0.3);
            (r, r, [0.0; 3], jitter(rng, [0.85, 0.45, 0.1], 0.05), jitter(rng, [0.45, 0.2, 0.05], 0.05))
        }
        1 => {
            let a = pick(rng, 0.25, 0.7);
            let b = (a * rng.random_range(0.3..0.45)).max(2.0);
            (a, b, [0.0; 3], jitter(rng, [0.35, 0.2, 0.1], 0.04), jitter(rng, [0.15, 0.08, 0.05], 0.03))
        }
        _ => {
            let r = pick(rng, 0.45, 1.0);
            let w = [rng.random_range(-0.08..0.08), rng.random_range(-0.06..0.06), rng.random_range(-0.04..0.04)];
            (r, r * rng.random_range(0.8..1.0), w, jitter(rng, [0.72, 0.58, 0.35], 0.05), jitter(rng, [0.92, 0.88, 0.25], 0.04))
        }
    };
    let a = a.max(2.0);
    let b = b.max(2.0);
    Lesion {
        class_id,
        cx: rng.random_range(0.0..size),
        cy: rng.random_range(0.0..size),
        a,
        b,
        theta: rng.random_range(0.0..core::f64::consts::PI),
        wobble,
        phase: [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)],
        colour,
        core,
    }
}

fn background(rng: &mut Rng64, cfg: &SynthSceneConfig, img: &mut [f64]) {
    let n = cfg.size;
    let base = jitter(rng, [0.22, 0.5, 0.17], 0.04);
    let plane = n * n;
    match cfg.background {
        Background::Flat => {
            for c in 0..3 {
                img[c * plane..(c + 1) * plane].fill(base[c]);
            }
        }
        Background::TexturedClutter => {
            let waves: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    let ang = rng.random_range(0.0..6.3);
                    let f = rng.random_range(0.01..0.05);
                    (f * libm::cos(ang), f * libm::sin(ang), rng.random_range(0.0..6.3), rng.random_range(0.02..0.05))
                })
                .collect();
            let vein_ang = rng.random_range(-0.4..0.4);
            let (vc, vs) = (libm::cos(vein_ang), libm::sin(vein_ang));
            let vein_gap = rng.random_range(18.0..30.0);
            let mid = rng.random_range(0.3..0.7) * n as f64;
            for y in 0..n {
                for x in 0..n {
                    let (fx, fy) = (x as f64, y as f64);
                    let shade: f64 = waves.iter().map(|(kx, ky, p, amp)| amp * libm::sin(kx * fx + ky * fy + p)).sum();
                    let along = vc * fx + vs * (fy - mid);
                    let across = -vs * fx + vc * (fy - mid);
                    let midrib = (across.abs() < 1.5) as u8 as f64 * 0.12;
                    let side = libm::fmod((along + across.abs() * 0.8).abs(), vein_gap);
                    let vein = (side < 1.0) as u8 as f64 * 0.06;
                    let i = y * n + x;
                    let lift = shade + midrib + vein;
                    img[i] = (base[0] + lift * 0.6).clamp(0.0, 1.0);
                    img[plane + i] = (base[1] + lift).clamp(0.0, 1.0);
                    img[2 * plane + i] = (base[2] + lift * 0.5).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn overlaps(b: [f64; 4], others: &[[f64; 4]], margin: f64) -> bool {
    others
        .iter()
        .any(|o| b[0] < o[2] + margin && o[0] < b[2] + margin && b[1] < o[3] + margin && o[1] < b[3] + margin)
}

/// Renders one scene. Boxes are the tight pixel bounds of what was painted.
pub fn synth_scene(cfg: &SynthSceneConfig) -> SynthScene {
    let mut rng = Rng64::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let plane = n * n;
    let size = n as f64;
    let mut img = alloc::vec![0.0; 3 * plane];
    background(&mut rng, cfg, &mut img);
    let mut labels = alloc::vec![0u16; plane];

    let (cmin, cmax) = cfg.lesion_count;
    let count = rng.random_range(cmin..=cmax.max(cmin));
    let mut placed: Vec<(Lesion, [f64; 4])> = Vec::new();
    let mut failures = 0;
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..PLACEMENT_RETRIES {
            let l = draw_lesion(&mut rng, cfg);
            let e = l.extent() + 1.0;
            let bound = [l.cx - e, l.cy - e, l.cx + e, l.cy + e];
            if bound[0] < 1.0 || bound[1] < 1.0 || bound[2] > size - 1.0 || bound[3] > size - 1.0 {
                continue;
            }
            let boxes: Vec<[f64; 4]> = placed.iter().map(|p| p.1).collect();
            if overlaps(bound, &boxes, 3.0) {
                continue;
            }
            placed.push((l, bound));
            ok = true;
            break;
        }
        failures += !ok as usize;
    }

    let mut distractor_boxes = Vec::new();
    if cfg.background == Background::TexturedClutter {
        let (dmin, dmax) = cfg.distractors;
        let k = rng.random_range(dmin..=dmax.max(dmin));
        let lesion_boxes: Vec<[f64; 4]> = placed.iter().map(|p| p.1).collect();
        for _ in 0..k {
            for _ in 0..PLACEMENT_RETRIES {
                let w = rng.random_range(6.0..20.0);
                let h = rng.random_range(6.0..20.0);
                let x = rng.random_range(1.0..size - w - 1.0);
                let y = rng.random_range(1.0..size - h - 1.0);
                let b = [x, y, x + w, y + h];
                if overlaps(b, &lesion_boxes, 3.0) || overlaps(b, &distractor_boxes, 1.0) {
                    continue;
                }
                let template = [[0.85, 0.45, 0.1], [0.35, 0.2, 0.1], [0.72, 0.58, 0.35]][rng.random_range(0..3)];
                let colour = jitter(&mut rng, template, 0.05);
                for py in (y as usize)..((y + h) as usize) {
                    for px in (x as usize)..((x + w) as usize) {
                        for c in 0..3 {
                            img[c * plane + py * n + px] = colour[c];
                        }
                    }
                }
                distractor_boxes.push(b);
                break;
            }
        }
    }

    let mut tight: Vec<[usize; 4]> = alloc::vec![[usize::MAX, usize::MAX, 0, 0]; placed.len()];
    for (idx, (l, bound)) in placed.iter().enumerate() {
        let x0 = bound[0].max(0.0) as usize;
        let y0 = bound[1].max(0.0) as usize;
        let x1 = (bound[2] as usize + 1).min(n);
        let y1 = (bound[3] as usize + 1).min(n);
        for py in y0..y1 {
            for px in x0..x1 {
                if let Some(col) = l.shade(px as f64 + 0.5, py as f64 + 0.5) {
                    for c in 0..3 {
                        img[c * plane + py * n + px] = col[c];
                    }
                    labels[py * n + px] = idx as u16 + 1;
                    let t = &mut tight[idx];
                    t[0] = t[0].min(px);
                    t[1] = t[1].min(py);
                    t[2] = t[2].max(px + 1);
                    t[3] = t[3].max(py + 1);
                }
            }
        }
    }
    let boxes = placed
        .iter()
        .zip(&tight)
        .filter(|(_, t)| t[0] != usize::MAX)
        .map(|((l, _), t)| DetectionBox::from_corners(l.class_id, 1.0, t.map(|v| v as f64 / size)))
        .collect();

    SynthScene {
        sample: AnnotatedImage {
            image: Tensor::from_parts(alloc::vec![3, n, n], img),
            boxes,
            source: alloc::format!("synth-{}", cfg.seed),
        },
        labels,
        placement_failures: failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SynthSceneConfig::toy(42);
        let (a, b) = (synth_scene(&cfg), synth_scene(&cfg));
        assert!(a.sample.image.bit_eq(&b.sample.image));
        assert_eq!(a.sample.boxes, b.sample.boxes);
        let c = synth_scene(&SynthSceneConfig::toy(43));
        assert!(!a.sample.image.bit_eq(&c.sample.image));
    }

    #[test]
    fn exact_count() {
        for seed in 0..10 {
            let cfg = SynthSceneConfig { lesion_count: (3, 3), ..SynthSceneConfig::toy(seed) };
            let s = synth_scene(&cfg);
            assert_eq!(s.sample.boxes.len() + s.placement_failures, 3);
        }
    }

    #[test]
    fn boxes_are_tight_pixel_bounds() {
        for seed in 0..20 {
            let s = synth_scene(&SynthSceneConfig::toy(seed));
            let n = 256;
            for (i, b) in s.sample.boxes.iter().enumerate() {
                assert!(b.is_valid());
                let [x1, y1, x2, y2] = b.corners().map(|v| (v * n as f64).round() as usize);
                let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (n, n, 0, 0);
                for (p, &l) in s.labels.iter().enumerate() {
                    if l as usize == i + 1 {
                        let (x, y) = (p % n, p / n);
                        assert!(x >= x1 && x < x2 && y >= y1 && y < y2);
                        lo_x = lo_x.min(x);
                        lo_y = lo_y.min(y);
                        hi_x = hi_x.max(x + 1);
                        hi_y = hi_y.max(y + 1);
                    }
                }
                assert_eq!([lo_x, lo_y, hi_x, hi_y], [x1, y1, x2, y2]);
            }
            assert!(s.sample.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn flat_background_has_no_distractors() {
        let cfg = SynthSceneConfig { background: Background::Flat, lesion_count: (0, 0), ..SynthSceneConfig::toy(1) };
        let s = synth_scene(&cfg);
        assert!(s.sample.boxes.is_empty());
        let d = s.sample.image.data();
        assert!(d[..256 * 256].iter().all(|v| *v == d[0]));
    }
}
