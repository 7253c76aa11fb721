//! Axis-aligned boxes, IoU and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::dump::Detection;
use crate::error::{Error, Result};
use crate::Scalar;

/// Corner-coded box in absolute pixels, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T = f64> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BoundingBox<T> {
    /// Checked constructor: finite, non-negative, `x1 < x2` and `y1 < y2`.
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        match b.violation() {
            None => Ok(b),
            Some(msg) => Err(Error::InvalidParameter(msg)),
        }
    }

    /// Describes the first broken invariant, if any.
    pub fn violation(&self) -> Option<String> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Some("box has a non-finite coordinate".into());
        }
        if coords.iter().any(|c| *c < T::zero()) {
            return Some("box has a negative coordinate".into());
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Some(format!(
                "box corners out of order ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            ));
        }
        None
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn iou(&self, other: &Self) -> T {
        compute_iou(self, other)
    }
}

/// Intersection over union. Returns 0 for disjoint or degenerate pairs.
pub fn compute_iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// Greedy NMS returning kept indices in descending-confidence order.
///
/// Equal confidences are visited in input order. With `classes` set, a box
/// only suppresses boxes of the same class.
pub fn nms_indices<T: Scalar>(
    boxes: &[BoundingBox<T>],
    scores: &[T],
    classes: Option<&[usize]>,
    iou_threshold: T,
) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // stable sort keeps the smaller index first on ties
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            let comparable = classes.is_none_or(|c| c[k] == c[i]);
            comparable && compute_iou(&boxes[k], &boxes[i]) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// NMS over detections, keeping survivors in descending-confidence order.
pub fn apply_nms(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<Detection> {
    let boxes: Vec<BoundingBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    let classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    nms_indices(&boxes, &scores, class_aware.then_some(classes.as_slice()), iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}
