//! Axis-aligned boxes, intersection-over-union and greedy NMS.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Axis-aligned rectangle in pixel coordinates. Width and height are
/// strictly positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: Real,
    pub y_min: Real,
    pub width: Real,
    pub height: Real,
}

impl BBox {
    pub fn new(x_min: Real, y_min: Real, width: Real, height: Real) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) || !x_min.is_finite() || !y_min.is_finite() || !width.is_finite() || !height.is_finite() {
            return Err(Error::InvalidBox(format!(
                "({x_min}, {y_min}, {width}, {height}) needs finite coordinates and positive size"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            width,
            height,
        })
    }

    pub fn from_corners(x_min: Real, y_min: Real, x_max: Real, y_max: Real) -> Result<Self> {
        Self::new(x_min, y_min, x_max - x_min, y_max - y_min)
    }

    pub fn from_center(cx: Real, cy: Real, width: Real, height: Real) -> Result<Self> {
        Self::new(cx - width / 2.0, cy - height / 2.0, width, height)
    }

    pub fn x_max(&self) -> Real {
        self.x_min + self.width
    }

    pub fn y_max(&self) -> Real {
        self.y_min + self.height
    }

    pub fn center(&self) -> (Real, Real) {
        (self.x_min + self.width / 2.0, self.y_min + self.height / 2.0)
    }

    pub fn area(&self) -> Real {
        self.width * self.height
    }

    /// Intersection with `[0, width] × [0, height]`, or `None` if empty.
    pub fn clip(&self, width: Real, height: Real) -> Option<BBox> {
        let x0 = self.x_min.clamp(0.0, width);
        let y0 = self.y_min.clamp(0.0, height);
        let x1 = self.x_max().clamp(0.0, width);
        let y1 = self.y_max().clamp(0.0, height);
        BBox::from_corners(x0, y0, x1, y1).ok()
    }

    pub fn intersection_area(&self, other: &BBox) -> Real {
        let w = self.x_max().min(other.x_max()) - self.x_min.max(other.x_min);
        let h = self.y_max().min(other.y_max()) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max() >= other.x_max()
            && self.y_max() >= other.y_max()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Real {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    // min() guards against rounding pushing the ratio past 1.
    (inter / (a.area() + b.area() - inter)).min(1.0)
}

/// Regression target `(t^x, t^y, t^w, t^h)` of `gt` relative to `reference`:
/// centre offsets in units of the reference size, then log size ratios.
pub fn encode_bbox(gt: &BBox, reference: &BBox) -> [Real; 4] {
    let (gx, gy) = gt.center();
    let (rx, ry) = reference.center();
    [
        (gx - rx) / reference.width,
        (gy - ry) / reference.height,
        (gt.width / reference.width).ln(),
        (gt.height / reference.height).ln(),
    ]
}

/// Inverse of [`encode_bbox`].
pub fn decode_bbox(t: &[Real; 4], reference: &BBox) -> Result<BBox> {
    let (rx, ry) = reference.center();
    BBox::from_center(
        rx + t[0] * reference.width,
        ry + t[1] * reference.height,
        reference.width * t[2].exp(),
        reference.height * t[3].exp(),
    )
}

/// Anything NMS can rank and compare.
pub trait Scored {
    fn bbox(&self) -> BBox;
    fn score(&self) -> Real;
}

/// A box with a confidence score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: Real,
}

impl Scored for ScoredBox {
    fn bbox(&self) -> BBox {
        self.bbox
    }

    fn score(&self) -> Real {
        self.score
    }
}

/// Indices in descending score order, ties kept in input order.
pub fn rank_by_score<T: Scored>(items: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].score().total_cmp(&items[a].score()));
    order
}

/// Greedy non-maximum suppression. Visits items by descending score and
/// drops any whose IoU with an already kept item exceeds `iou_threshold`.
/// Returns kept indices in visiting order.
pub fn nms_indices<T: Scored>(items: &[T], iou_threshold: Real) -> Vec<usize> {
    let boxes: Vec<BBox> = items.iter().map(Scored::bbox).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_by_score(items) {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms<T: Scored + Clone>(items: &[T], iou_threshold: Real) -> Vec<T> {
    nms_indices(items, iou_threshold)
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}
