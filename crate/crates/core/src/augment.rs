//! Geometric and photometric augmentation that keeps boxes consistent with pixels.

use crate::boxes::DetectionBox;
use crate::synth::AnnotatedImage;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augment {
    HFlip,
    VFlip,
    /// Quarter turn counter-clockwise (square images).
    Rot90,
    /// Adds `delta` to every channel and clamps to `[0, 1]`.
    Brightness(f64),
}

fn remap(image: &Tensor, f: impl Fn(usize, usize, usize, usize) -> (usize, usize)) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut out = alloc::vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = f(y, x, h, w);
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

pub fn apply(sample: &AnnotatedImage, op: Augment) -> AnnotatedImage {
    let map_boxes = |f: &dyn Fn(&DetectionBox) -> DetectionBox| sample.boxes.iter().map(f).collect();
    let (image, boxes) = match op {
        Augment::HFlip => (
            remap(&sample.image, |y, x, _, w| (y, w - 1 - x)),
            map_boxes(&|b| DetectionBox { cx: 1.0 - b.cx, ..*b }),
        ),
        Augment::VFlip => (
            remap(&sample.image, |y, x, h, _| (h - 1 - y, x)),
            map_boxes(&|b| DetectionBox { cy: 1.0 - b.cy, ..*b }),
        ),
        Augment::Rot90 => {
            assert_eq!(sample.image.shape()[1], sample.image.shape()[2], "rot90 needs a square image");
            (
                remap(&sample.image, |y, x, _, w| (x, w - 1 - y)),
                map_boxes(&|b| DetectionBox { cx: b.cy, cy: 1.0 - b.cx, w: b.h, h: b.w, ..*b }),
            )
        }
        Augment::Brightness(d) => (sample.image.map(|v| (v + d).clamp(0.0, 1.0)), sample.boxes.clone()),
    };
    AnnotatedImage { image, boxes, source: sample.source.clone() }
}
