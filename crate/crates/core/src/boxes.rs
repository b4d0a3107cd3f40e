//! Normalized center-format boxes and overlap measures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Box in normalized `(cx, cy, w, h)` form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box {0:?} has non-finite coordinates")]
    NonFinite([f64; 4]),
    #[error("box {0:?}: center must lie in [0, 1]")]
    Center([f64; 4]),
    #[error("box {0:?}: width and height must lie in (0, 1]")]
    Size([f64; 4]),
}

impl BBox {
    pub const fn new_unchecked(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds a box and checks the normalized-coordinate invariants.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, BoxError> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<(), BoxError> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(BoxError::NonFinite(a));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(BoxError::Center(a));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(BoxError::Size(a));
        }
        Ok(())
    }

    /// True when the box lies inside the unit square (up to `tol`).
    pub fn inside_unit(&self, tol: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x1 >= -tol && y1 >= -tol && x2 <= 1.0 + tol && y2 <= 1.0 + tol
    }
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a.corners(), b.corners());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: IoU minus the share of the enclosing box not covered by
/// the union. Lies in `(-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection(ca, cb);
    let union = a.area() + b.area() - inter;
    let enclose = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    if union <= 0.0 || enclose <= 0.0 {
        return 0.0;
    }
    inter / union - (enclose - union) / enclose
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_boxes() {
        let b = BBox::new(0.4, 0.6, 0.2, 0.3).unwrap();
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(giou(&b, &b), 1.0);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = BBox::new(0.2, 0.2, 0.1, 0.1).unwrap();
        let b = BBox::new(0.8, 0.8, 0.1, 0.1).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn half_shifted_boxes() {
        // corners [0, 0, 0.5, 0.5] and [0.25, 0, 0.75, 0.5]
        let a = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
        let b = BBox::new(0.5, 0.25, 0.5, 0.5).unwrap();
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unit_boxes_two_apart() {
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_corners(2.0, 0.0, 3.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert!((giou(&a, &b) + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(matches!(BBox::new(0.5, 0.5, 0.0, 0.1), Err(BoxError::Size(_))));
        assert!(matches!(BBox::new(1.5, 0.5, 0.1, 0.1), Err(BoxError::Center(_))));
        assert!(matches!(BBox::new(f64::NAN, 0.5, 0.1, 0.1), Err(BoxError::NonFinite(_))));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.01..=1.0f64, 0.01..=1.0f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let i = iou(&a, &b);
            let g = giou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(g <= i + 1e-15);
            prop_assert!(g > -1.0 && g <= 1.0);
        }

        #[test]
        fn overlaps_are_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-15);
            prop_assert!((giou(&a, &b) - giou(&b, &a)).abs() < 1e-15);
        }
    }
}
