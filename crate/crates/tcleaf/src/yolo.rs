//! YOLO txt labels and PNG images.
//!
//! A label file holds one `class cx cy w h` line per box, coordinates
//! normalised to `[0, 1]`. Blank lines are skipped.

use std::path::Path;

use tcleaf_core::boxes::DetectionBox;
use tcleaf_core::synth::AnnotatedImage;
use tcleaf_core::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum YoloError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Image { path: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> YoloError + '_ {
    move |source| YoloError::Io { path: path.display().to_string(), source }
}

/// Parses label text. Boxes are clipped to the image; a box that ends up
/// with no area inside it is an error.
pub fn parse_labels(text: &str, num_classes: usize, path: &str) -> Result<Vec<DetectionBox>, YoloError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| YoloError::Parse { path: path.to_string(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected `class cx cy w h`, got {} fields", fields.len())));
        }
        let class: usize = fields[0].parse().map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        if class >= num_classes {
            return Err(err(format!("class {class} out of range (num_classes {num_classes})")));
        }
        let mut v = [0.0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad coordinate {f:?}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite coordinate {f:?}")));
            }
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err("width and height must be positive".into()));
        }
        let b = DetectionBox::new(class, 1.0, v[0], v[1], v[2], v[3]);
        let inside = b.corners().iter().all(|c| (0.0..=1.0).contains(c));
        out.push(if inside { b } else { b.clipped().ok_or_else(|| err("box lies outside the image".into()))? });
    }
    Ok(out)
}

pub fn format_labels(boxes: &[DetectionBox]) -> String {
    boxes.iter().map(|b| format!("{} {:.6} {:.6} {:.6} {:.6}\n", b.class_id, b.cx, b.cy, b.w, b.h)).collect()
}

pub fn read_labels(path: &Path, num_classes: usize) -> Result<Vec<DetectionBox>, YoloError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_labels(&text, num_classes, &path.display().to_string())
}

pub fn write_labels(path: &Path, boxes: &[DetectionBox]) -> Result<(), YoloError> {
    std::fs::write(path, format_labels(boxes)).map_err(io_err(path))
}

/// RGB image as `[3, H, W]` in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor, YoloError> {
    let img = image::open(path).map_err(|e| YoloError::Image { path: path.display().to_string(), msg: e.to_string() })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_fn(&[3, h, w], |i| data[i]))
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<(), YoloError> {
    let s = t.shape();
    let bad = |msg: String| YoloError::Image { path: path.display().to_string(), msg };
    if s.len() != 3 || s[0] != 3 {
        return Err(bad(format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| bad(e.to_string()))
}

/// Loads an image and its label file into one sample.
pub fn load_yolo_txt(image_path: &Path, label_path: &Path, num_classes: usize) -> Result<AnnotatedImage, YoloError> {
    Ok(AnnotatedImage {
        image: read_image(image_path)?,
        boxes: read_labels(label_path, num_classes)?,
        source: image_path.display().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tcleaf_core::rng::seeded;

    #[test]
    fn literal_line() {
        let b = parse_labels("0 0.5 0.5 0.2 0.2\n", 3, "t").unwrap();
        assert_eq!(b, vec![DetectionBox::new(0, 1.0, 0.5, 0.5, 0.2, 0.2)]);
        assert!(parse_labels("", 3, "t").unwrap().is_empty());
        assert!(parse_labels("\n  \n", 3, "t").unwrap().is_empty());
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse_labels("0 0.5 0.5 0.2 0.2\n1 0.5 0.5 0.2\n", 3, "a.txt").unwrap_err();
        assert!(matches!(e, YoloError::Parse { line: 2, .. }));
        assert!(e.to_string().starts_with("a.txt:2:"));
        let e = parse_labels("\n3 0.5 0.5 0.2 0.2\n", 3, "a").unwrap_err();
        assert!(matches!(e, YoloError::Parse { line: 2, .. }) && e.to_string().contains("out of range"));
        assert!(parse_labels("0 x 0.5 0.2 0.2", 3, "a").is_err());
        assert!(parse_labels("0 0.5 0.5 0 0.2", 3, "a").is_err());
        assert!(parse_labels("0 2.0 2.0 0.2 0.2", 3, "a").is_err());
    }

    #[test]
    fn partially_outside_boxes_are_clipped() {
        let b = parse_labels("1 0.95 0.5 0.2 0.2", 3, "a").unwrap()[0];
        let c = b.corners();
        assert!((c[0] - 0.85).abs() < 1e-12 && (c[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn write_then_read_round_trip() {
        let mut rng = seeded(4);
        for _ in 0..100 {
            let boxes: Vec<DetectionBox> = (0..rng.random_range(0..6))
                .map(|_| {
                    let (w, h) = (rng.random_range(0.01..0.5), rng.random_range(0.01..0.5));
                    let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
                    let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
                    DetectionBox::new(rng.random_range(0..3), 1.0, cx, cy, w, h)
                })
                .collect();
            let back = parse_labels(&format_labels(&boxes), 3, "r").unwrap();
            assert_eq!(back.len(), boxes.len());
            for (a, b) in back.iter().zip(&boxes) {
                assert_eq!(a.class_id, b.class_id);
                for (x, y) in [(a.cx, b.cx), (a.cy, b.cy), (a.w, b.w), (a.h, b.h)] {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn png_round_trip_within_quantisation() {
        let t = Tensor::from_fn(&[3, 5, 7], |i| (i % 11) as f64 / 10.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_image(&p, &t).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
    }
}
