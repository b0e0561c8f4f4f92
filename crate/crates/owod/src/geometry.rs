//! Boxes, overlap measures, and mask-to-box extraction.
//!
//! The canonical box form everywhere is normalized center-size
//! `(cx, cy, w, h)` relative to image width/height; corner form is derived
//! on demand. Touching edges count as zero overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box in normalized center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

    /// Center within `[0,1]`, strictly positive extent no larger than 1.
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
            && self.cx.is_finite()
            && self.cy.is_finite()
    }

    /// `(x1, y1, x2, y2)` corner form.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union in `[0, 1]`. Touching edges yield 0.
///
/// Areas are derived from the same corner values as the intersection so
/// identical boxes give exactly 1.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    inter / union
}

/// Generalized IoU in `[-1, 1]`: IoU minus the normalized slack of the
/// smallest enclosing box. Equals IoU when the enclosing box is tight.
pub fn generalized_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    let enc = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (enc - union) / enc
}

/// Sum of absolute differences over the four center-size coordinates.
pub fn l1_distance(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Row-major bit grid, e.g. a segmentation mask.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

/// Tightest normalized box containing every set bit of the mask.
///
/// Pixel `(r, c)` occupies the cell `[c/W, (c+1)/W] x [r/H, (r+1)/H]`.
pub fn mask_to_box(mask: &BinaryMask) -> Result<BBox> {
    let mut min_r = usize::MAX;
    let mut max_r = 0usize;
    let mut min_c = usize::MAX;
    let mut max_c = 0usize;
    let mut found = false;
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                found = true;
                min_r = min_r.min(r);
                max_r = max_r.max(r);
                min_c = min_c.min(c);
                max_c = max_c.max(c);
            }
        }
    }
    if !found {
        return Err(Error::EmptyMask);
    }
    let w = mask.width() as f64;
    let h = mask.height() as f64;
    Ok(BBox::from_corners(
        min_c as f64 / w,
        min_r as f64 / h,
        (max_c + 1) as f64 / w,
        (max_r + 1) as f64 / h,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h)
    }

    #[test]
    fn iou_identity() {
        let a = b(0.3, 0.4, 0.2, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_corner_touching_is_zero() {
        let a = b(0.25, 0.25, 0.5, 0.5);
        let c = b(0.75, 0.75, 0.5, 0.5);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn iou_containment_half() {
        let unit = b(0.5, 0.5, 1.0, 1.0);
        let left = b(0.25, 0.5, 0.5, 1.0);
        assert!((iou(&unit, &left) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn giou_identity_and_sign() {
        let a = b(0.3, 0.4, 0.2, 0.5);
        assert!((generalized_iou(&a, &a) - 1.0).abs() < 1e-12);
        let far1 = b(0.1, 0.1, 0.1, 0.1);
        let far2 = b(0.9, 0.9, 0.1, 0.1);
        assert!(generalized_iou(&far1, &far2) < 0.0);
    }

    #[test]
    fn giou_hand_computed_case() {
        // a corners (0.10,0.10,0.40,0.40), b corners (0.30,0.20,0.60,0.50):
        // inter 0.02, union 0.16, enclosing 0.20.
        let a = b(0.25, 0.25, 0.3, 0.3);
        let c = b(0.45, 0.35, 0.3, 0.3);
        assert!((iou(&a, &c) - 0.125).abs() < 1e-12);
        assert!((generalized_iou(&a, &c) - (-0.075)).abs() < 1e-12);
    }

    #[test]
    fn corner_roundtrip() {
        let a = b(0.37, 0.62, 0.11, 0.43);
        let (x1, y1, x2, y2) = a.corners();
        let back = BBox::from_corners(x1, y1, x2, y2);
        assert!((back.cx - a.cx).abs() < 1e-9);
        assert!((back.cy - a.cy).abs() < 1e-9);
        assert!((back.w - a.w).abs() < 1e-9);
        assert!((back.h - a.h).abs() < 1e-9);
    }

    #[test]
    fn mask_full_and_single_bit() {
        let mut full = BinaryMask::new(4, 8);
        for r in 0..4 {
            for c in 0..8 {
                full.set(r, c, true);
            }
        }
        let box_full = mask_to_box(&full).unwrap();
        assert_eq!(box_full, b(0.5, 0.5, 1.0, 1.0));

        let mut single = BinaryMask::new(4, 8);
        single.set(2, 5, true);
        let box_single = mask_to_box(&single).unwrap();
        let (x1, y1, x2, y2) = box_single.corners();
        assert!((x1 - 5.0 / 8.0).abs() < 1e-12);
        assert!((x2 - 6.0 / 8.0).abs() < 1e-12);
        assert!((y1 - 2.0 / 4.0).abs() < 1e-12);
        assert!((y2 - 3.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn mask_l_shape_bounding_rectangle() {
        // L over rows 1..=6 col 2, plus row 6 cols 2..=7 in a 10x10 grid:
        // bounding rectangle rows 1..=6, cols 2..=7.
        let mut m = BinaryMask::new(10, 10);
        for r in 1..=6 {
            m.set(r, 2, true);
        }
        for c in 2..=7 {
            m.set(6, c, true);
        }
        let bb = mask_to_box(&m).unwrap();
        let (x1, y1, x2, y2) = bb.corners();
        assert!((x1 - 0.2).abs() < 1e-12);
        assert!((x2 - 0.8).abs() < 1e-12);
        assert!((y1 - 0.1).abs() < 1e-12);
        assert!((y2 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = BinaryMask::new(3, 3);
        assert!(matches!(mask_to_box(&m), Err(Error::EmptyMask)));
    }

    prop_compose! {
        fn arb_box()(cx in 0.05f64..0.95, cy in 0.05f64..0.95,
                     w in 0.01f64..0.5, h in 0.01f64..0.5) -> BBox {
            BBox::new(cx, cy, w.min(2.0 * cx.min(1.0 - cx)).max(0.01),
                      h.min(2.0 * cy.min(1.0 - cy)).max(0.01))
        }
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(), c in arb_box()) {
            prop_assert!((iou(&a, &c) - iou(&c, &a)).abs() < 1e-12);
        }

        #[test]
        fn giou_never_exceeds_iou(a in arb_box(), c in arb_box()) {
            prop_assert!(generalized_iou(&a, &c) <= iou(&a, &c) + 1e-9);
        }

        #[test]
        fn iou_bounds(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            let g = generalized_iou(&a, &c);
            prop_assert!((-1.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn mask_box_contains_every_set_pixel() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h = rng.gen_range(2..20);
            let w = rng.gen_range(2..20);
            let mut m = BinaryMask::new(h, w);
            let mut any = false;
            for r in 0..h {
                for c in 0..w {
                    if rng.gen_bool(0.15) {
                        m.set(r, c, true);
                        any = true;
                    }
                }
            }
            if !any {
                m.set(rng.gen_range(0..h), rng.gen_range(0..w), true);
            }
            let bb = mask_to_box(&m).unwrap();
            let (x1, y1, x2, y2) = bb.corners();
            for r in 0..h {
                for c in 0..w {
                    if m.get(r, c) {
                        let (px1, py1) = (c as f64 / w as f64, r as f64 / h as f64);
                        let (px2, py2) = ((c + 1) as f64 / w as f64, (r + 1) as f64 / h as f64);
                        assert!(px1 >= x1 - 1e-12 && px2 <= x2 + 1e-12);
                        assert!(py1 >= y1 - 1e-12 && py2 <= y2 + 1e-12);
                    }
                }
            }
        }
    }
}
