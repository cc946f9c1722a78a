//! Axis-aligned boxes in image coordinates, plus the center-offset /
//! log-extent delta parametrization shared by anchor regression and the
//! face-to-body spatial relation.

/// Box in center form: (cx, cy) center, (w, h) positive extents, pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

/// decode clamps log-extent deltas to +-ln(1000/16) before exponentiation.
pub const DELTA_CLAMP: f32 = 4.135_166_6; // ln(1000/16)

impl Bbox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Bbox { cx, cy, w, h }
    }

    pub fn from_corners(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Bbox {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// (x1, y1, x2, y2).
    pub fn corners(&self) -> (f32, f32, f32, f32) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn min_side(&self) -> f32 {
        self.w.min(self.h)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Clips to [0, img_w] x [0, img_h], keeping at least `min_side` pixels
    /// per axis so a clipped box never collapses.
    pub fn clip(&self, img_w: f32, img_h: f32, min_side: f32) -> Bbox {
        let (x1, y1, x2, y2) = self.corners();
        let mut x1 = x1.clamp(0.0, img_w);
        let mut y1 = y1.clamp(0.0, img_h);
        let mut x2 = x2.clamp(0.0, img_w);
        let mut y2 = y2.clamp(0.0, img_h);
        if x2 - x1 < min_side {
            if x2 >= img_w - f32::EPSILON * img_w {
                x1 = (x2 - min_side).max(0.0);
            } else {
                x2 = (x1 + min_side).min(img_w);
                x1 = (x2 - min_side).max(0.0);
            }
        }
        if y2 - y1 < min_side {
            if y2 >= img_h - f32::EPSILON * img_h {
                y1 = (y2 - min_side).max(0.0);
            } else {
                y2 = (y1 + min_side).min(img_h);
                y1 = (y2 - min_side).max(0.0);
            }
        }
        Bbox::from_corners(x1, y1, x2, y2)
    }

    /// Intersection-over-union; 0 for disjoint boxes.
    pub fn iou(&self, other: &Bbox) -> f32 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw as f64 * ih as f64;
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() as f64 + other.area() as f64 - inter;
        (inter / union) as f32
    }
}

/// Deltas (t_x, t_y, t_w, t_h) mapping `src` onto `target`:
/// t_x = (cx_t - cx_s) / w_s, t_y = (cy_t - cy_s) / h_s,
/// t_w = ln(w_t / w_s), t_h = ln(h_t / h_s).
pub fn encode_deltas(src: &Bbox, target: &Bbox) -> [f32; 4] {
    [
        (target.cx - src.cx) / src.w,
        (target.cy - src.cy) / src.h,
        (target.w / src.w).ln(),
        (target.h / src.h).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; extent deltas are clamped to
/// +-[`DELTA_CLAMP`] before exponentiation.
pub fn decode_deltas(src: &Bbox, t: [f32; 4]) -> Bbox {
    let tw = t[2].clamp(-DELTA_CLAMP, DELTA_CLAMP);
    let th = t[3].clamp(-DELTA_CLAMP, DELTA_CLAMP);
    Bbox {
        cx: src.cx + t[0] * src.w,
        cy: src.cy + t[1] * src.h,
        w: src.w * tw.exp(),
        h: src.h * th.exp(),
    }
}
