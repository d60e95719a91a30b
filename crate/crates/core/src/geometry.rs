//! Box algebra: center-parameterized boxes, paired boxes spanning two adjacent
//! frames, 2D and paired ("3D") IoU/GIoU, and greedy non-maximum suppression.
//!
//! Degenerate boxes (zero width or height) are legal everywhere. Any ratio whose
//! denominator vanishes is defined as 0.

use serde::{Deserialize, Serialize};

/// Axis-aligned box stored as center, width and height (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds a box from corner form. Inverted corners are collapsed to a
    /// zero extent rather than producing a negative size.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let w = (x2 - x1).max(0.0);
        let h = (y2 - y1).max(0.0);
        Self {
            cx: x1 + w / 2.0,
            cy: y1 + h / 2.0,
            w,
            h,
        }
    }

    /// Builds a box from MOTChallenge-style left/top/width/height.
    pub fn from_ltwh(left: f64, top: f64, w: f64, h: f64) -> Self {
        Self::new(left + w / 2.0, top + h / 2.0, w, h)
    }

    /// Corner form `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = self.w.max(0.0) / 2.0;
        let hh = self.h.max(0.0) / 2.0;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.cx * k, self.cy * k, self.w * k, self.h * k)
    }

    pub fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }
}

/// The same object's boxes in two adjacent frames; one diffusion sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairedBox {
    pub prev: BBox,
    pub cur: BBox,
}

impl PairedBox {
    pub fn new(prev: BBox, cur: BBox) -> Self {
        Self { prev, cur }
    }

    /// Both slots hold the same box; the detection-mode pair.
    pub fn duplicated(b: BBox) -> Self {
        Self { prev: b, cur: b }
    }

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.prev.cx,
            self.prev.cy,
            self.prev.w,
            self.prev.h,
            self.cur.cx,
            self.cur.cy,
            self.cur.w,
            self.cur.h,
        ]
    }

    pub fn from_array(v: [f64; 8]) -> Self {
        Self {
            prev: BBox::new(v[0], v[1], v[2], v[3]),
            cur: BBox::new(v[4], v[5], v[6], v[7]),
        }
    }

    pub fn frames(&self) -> [&BBox; 2] {
        [&self.prev, &self.cur]
    }
}

/// An unlabeled detection: a box and its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub conf: f64,
}

impl Detection {
    pub fn new(bbox: BBox, conf: f64) -> Self {
        Self { bbox, conf }
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

fn enclosing_area(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    (ax2.max(bx2) - ax1.min(bx1)).max(0.0) * (ay2.max(by2) - ay1.min(by1)).max(0.0)
}

/// Intersection, union and enclosing-box areas of two boxes.
fn areas(a: &BBox, b: &BBox) -> (f64, f64, f64) {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    (inter, union, enclosing_area(a, b))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union, _) = areas(a, b);
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union, enclosing) = areas(a, b);
    if union <= 0.0 || enclosing <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosing - union) / enclosing
}

/// Summed-area IoU over both frames of two paired boxes.
pub fn iou3d(d: &PairedBox, g: &PairedBox) -> f64 {
    let (i0, u0, _) = areas(&d.prev, &g.prev);
    let (i1, u1, _) = areas(&d.cur, &g.cur);
    let union = u0 + u1;
    if union <= 0.0 {
        return 0.0;
    }
    ((i0 + i1) / union).clamp(0.0, 1.0)
}

/// Paired GIoU: the enclosing-box penalty is one absolute value around the
/// summed difference of enclosing and union areas.
pub fn giou3d(d: &PairedBox, g: &PairedBox) -> f64 {
    let (i0, u0, e0) = areas(&d.prev, &g.prev);
    let (i1, u1, e1) = areas(&d.cur, &g.cur);
    let union = u0 + u1;
    let enclosing = e0 + e1;
    if union <= 0.0 || enclosing <= 0.0 {
        return 0.0;
    }
    (i0 + i1) / union - ((e0 - u0) + (e1 - u1)).abs() / enclosing.abs()
}

/// Score-descending order; equal scores keep the lower index first.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn greedy_nms<T>(items: &[T], scores: &[f64], thresh: f64, overlap: impl Fn(&T, &T) -> f64) -> Vec<usize> {
    assert_eq!(items.len(), scores.len(), "nms: items and scores differ in length");
    let mut kept: Vec<usize> = Vec::new();
    for idx in descending_order(scores) {
        if kept.iter().all(|&k| overlap(&items[k], &items[idx]) <= thresh) {
            kept.push(idx);
        }
    }
    kept
}

/// Greedy NMS on single boxes. A box is dropped iff its IoU with an already
/// kept, higher-ranked box exceeds `thresh`.
pub fn nms2d(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    greedy_nms(boxes, scores, thresh, iou)
}

/// Greedy NMS on paired boxes using [`iou3d`].
pub fn nms3d(pairs: &[PairedBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    greedy_nms(pairs, scores, thresh, iou3d)
}
