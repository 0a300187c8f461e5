use std::cmp::Ordering;
use std::fmt;

use crate::tensor::sigmoid;

use super::model::{RawPrediction, STRIDES};

/// Axis-aligned box in pixels, `x1 < x2` and `y1 < y2` when valid.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0) as f64) * (self.height().max(0.0) as f64)
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn clip(&self, w: f32, h: f32) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

/// Intersection over union, computed in f64. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    pub bbox: BBox,
}

/// `class_id score x1 y1 x2 y2`, score to 4 decimals and coordinates to 1.
impl fmt::Display for Detection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.bbox;
        write!(
            f,
            "{} {:.4} {:.1} {:.1} {:.1} {:.1}",
            self.class_id, self.score, b.x1, b.y1, b.x2, b.y2
        )
    }
}

/// Candidates for batch item `n`, in network-input coordinates.
///
/// Each cell whose class probability exceeds `conf` yields one candidate per
/// such class. Boxes are clipped to the input square; boxes that collapse are
/// dropped.
pub fn decode_item(raw: &RawPrediction, n: usize, conf: f32) -> Vec<Detection> {
    let size = raw.input_size() as f32;
    let nc = raw.num_classes();
    let mut out = Vec::new();
    for (level, &stride) in raw.levels.iter().zip(STRIDES.iter()) {
        let s = level.shape();
        let plane = s.plane();
        let item = &level.data()[n * s.c * plane..(n + 1) * s.c * plane];
        let st = stride as f32;
        for i in 0..s.h {
            for j in 0..s.w {
                let at = |c: usize| item[c * plane + i * s.w + j];
                let (cx, cy) = ((j as f32 + 0.5) * st, (i as f32 + 0.5) * st);
                let bbox = BBox::new(
                    cx - at(0).max(0.0) * st,
                    cy - at(1).max(0.0) * st,
                    cx + at(2).max(0.0) * st,
                    cy + at(3).max(0.0) * st,
                )
                .clip(size, size);
                if !bbox.is_valid() {
                    continue;
                }
                for k in 0..nc {
                    let score = sigmoid(at(4 + k));
                    if score > conf {
                        out.push(Detection {
                            class_id: k,
                            score,
                            bbox,
                        });
                    }
                }
            }
        }
    }
    out
}

/// [`decode_item`] for every batch item.
pub fn decode(raw: &RawPrediction, conf: f32) -> Vec<Vec<Detection>> {
    (0..raw.batch()).map(|n| decode_item(raw, n, conf)).collect()
}

/// Total order used by NMS: score descending, then class, then coordinates
/// ascending.
pub fn nms_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Greedy per-class suppression. A candidate survives iff its IoU with every
/// already kept box of its class is at most `iou_threshold`. Output is in
/// [`nms_order`].
pub fn nms(cands: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = cands.to_vec();
    sorted.sort_by(nms_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let clear = kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold);
        if clear {
            kept.push(d);
        }
    }
    kept
}
