//! Axis-aligned box algebra shared by the detector, tracker and attack.
//!
//! Boxes are stored in corner form `(x1, y1, x2, y2)` in pixel coordinates
//! with the origin at the top-left of the image. Center/size forms are
//! derived views.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Per-step displacement in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub dx: f64,
    pub dy: f64,
}

impl Vec2 {
    pub const fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn is_zero(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.dx * k, self.dy * k)
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }
}

impl BBox {
    /// Validated constructor: coordinates must be finite with `x1 < x2`
    /// and `y1 < y2`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_finite() {
            return Err(Error::InvalidBox(format!("non-finite coordinates {b:?}")));
        }
        if b.is_degenerate() {
            return Err(Error::InvalidBox(format!("zero or negative area {b:?}")));
        }
        Ok(b)
    }

    /// Unchecked constructor for boxes produced inside numeric loops.
    pub const fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 < self.x2 && self.y1 < self.y2)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::from_corners(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// `self + v * k`.
    pub fn shifted(&self, v: Vec2, k: u32) -> Self {
        let k = f64::from(k);
        self.translated(v.dx * k, v.dy * k)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

/// IOU together with a flag telling whether either input was degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouResult {
    pub value: f64,
    pub degenerate: bool,
}

/// IOU with degeneracy reporting. Degenerate inputs give a value of 0.
pub fn iou_checked(a: &BBox, b: &BBox) -> IouResult {
    if a.is_degenerate() || b.is_degenerate() {
        return IouResult { value: 0.0, degenerate: true };
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let value = if union > 0.0 { (inter / union).clamp(0.0, 1.0) } else { 0.0 };
    IouResult { value, degenerate: false }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_checked(a, b).value
}

pub fn center(b: &BBox) -> (f64, f64) {
    b.center()
}

pub fn shift(b: &BBox, v: Vec2, k: u32) -> BBox {
    b.shifted(v, k)
}

/// Class-aware greedy non-maximum suppression.
///
/// Candidates with confidence `<= conf_threshold` are dropped. The rest are
/// visited by descending confidence (ties by ascending input index) and a
/// candidate is kept iff its IOU with every already-kept candidate of the
/// same class is `<= iou_threshold`. Returned indices refer to `candidates`
/// and are in visiting order.
pub fn nms(candidates: &[(BBox, f64, usize)], iou_threshold: f64, conf_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].1 > conf_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .partial_cmp(&candidates[a].1)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let (bi, _, ci) = candidates[i];
        let suppressed = kept.iter().any(|&k| {
            let (bk, _, ck) = candidates[k];
            ck == ci && iou(&bi, &bk) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        // inter = 50, union = 150
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_iou_is_flagged() {
        let a = BBox::from_corners(0.0, 0.0, 0.0, 10.0);
        let r = iou_checked(&a, &b(0.0, 0.0, 10.0, 10.0));
        assert_eq!(r.value, 0.0);
        assert!(r.degenerate);
        assert!(BBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 10.0).is_err());
    }

    #[test]
    fn center_examples() {
        assert_eq!(center(&b(0.0, 0.0, 10.0, 10.0)), (5.0, 5.0));
        assert_eq!(center(&b(100.0, 100.0, 200.0, 200.0)), (150.0, 150.0));
        assert_eq!(center(&b(0.0, 0.0, 3.0, 7.0)), (1.5, 3.5));
    }

    #[test]
    fn shift_examples() {
        let x = b(100.0, 100.0, 200.0, 200.0);
        assert_eq!(shift(&x, Vec2::new(10.0, 0.0), 0), x);
        assert_eq!(shift(&x, Vec2::new(10.0, 0.0), 3), b(130.0, 100.0, 230.0, 200.0));
        assert_eq!(
            shift(&b(0.0, 0.0, 10.0, 10.0), Vec2::new(0.0, -5.0), 2),
            BBox::from_corners(0.0, -10.0, 10.0, 0.0)
        );
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5, 0.25).is_empty());
        let one = [(b(0.0, 0.0, 10.0, 10.0), 0.9, 0)];
        assert_eq!(nms(&one, 0.5, 0.25), vec![0]);

        // 9-wide overlap of two 10x10 boxes: IOU = 90/110 ≈ 0.818
        let a = b(0.0, 0.0, 10.0, 10.0);
        let c = b(1.0, 0.0, 11.0, 10.0);
        assert!(iou(&a, &c) > 0.8);
        assert_eq!(nms(&[(a, 0.7, 0), (c, 0.9, 0)], 0.5, 0.25), vec![1]);
        let mut both = nms(&[(a, 0.7, 0), (c, 0.9, 1)], 0.5, 0.25);
        both.sort();
        assert_eq!(both, vec![0, 1]);
    }

    #[test]
    fn nms_ties_break_on_index() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[(a, 0.5, 0), (a, 0.5, 0)], 0.5, 0.25), vec![0]);
        assert_eq!(nms(&[(a, 0.25, 0)], 0.5, 0.25), Vec::<usize>::new());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_corners(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&c, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_decreases_along_axis_shift(a in arb_box(), step in 0.1..5.0f64, horizontal in any::<bool>()) {
            let v = if horizontal { Vec2::new(step, 0.0) } else { Vec2::new(0.0, -step) };
            let mut prev = 1.0;
            for k in 0..30 {
                let cur = iou(&shift(&a, v, k), &a);
                prop_assert!(cur <= prev + 1e-12);
                prev = cur;
            }
        }

        #[test]
        fn nms_postconditions(
            items in prop::collection::vec((arb_box(), 0.0..1.0f64, 0usize..2), 0..25),
            thr in 0.1..0.9f64,
        ) {
            let kept = nms(&items, thr, 0.25);
            let mut sorted = kept.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), kept.len());
            for (n, &i) in kept.iter().enumerate() {
                prop_assert!(items[i].1 > 0.25);
                for &j in &kept[..n] {
                    if items[i].2 == items[j].2 {
                        prop_assert!(iou(&items[i].0, &items[j].0) <= thr);
                    }
                }
            }
            for (i, it) in items.iter().enumerate() {
                if it.1 <= 0.25 || kept.contains(&i) {
                    continue;
                }
                let covered = kept.iter().any(|&k| {
                    items[k].2 == it.2 && items[k].1 >= it.1 && iou(&items[k].0, &it.0) > thr
                });
                prop_assert!(covered);
            }
        }
    }
}
