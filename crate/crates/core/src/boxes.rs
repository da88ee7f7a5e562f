//! Axis-aligned boxes in normalised centre form.

/// `(cx, cy, w, h)` normalised to the image side; `score` is 1 for ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionBox {
    pub class_id: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl DetectionBox {
    pub fn new(class_id: usize, score: f64, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { class_id, score, cx, cy, w, h }
    }

    pub fn from_corners(class_id: usize, score: f64, [x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { class_id, score, cx: 0.5 * (x1 + x2), cy: 0.5 * (y1 + y2), w: x2 - x1, h: y2 - y1 }
    }

    /// `[x1, y1, x2, y2]`
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clips to the unit square. Returns `None` when nothing with positive
    /// area is left.
    pub fn clipped(&self) -> Option<Self> {
        let [x1, y1, x2, y2] = self.corners();
        let c = [x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0)];
        (c[2] > c[0] && c[3] > c[1]).then(|| Self::from_corners(self.class_id, self.score, c))
    }

    pub fn is_valid(&self) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        let eps = 1e-9;
        self.w > 0.0
            && self.h > 0.0
            && x1 >= -eps
            && y1 >= -eps
            && x2 <= 1.0 + eps
            && y2 <= 1.0 + eps
            && (0.0..=1.0).contains(&self.score)
    }
}

pub fn corner_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    corner_iou(a.corners(), b.corners())
}
