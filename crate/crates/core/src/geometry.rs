//! Box parameterizations and overlap measures.
//!
//! The model regresses normalized center/extent boxes ([`BoxCxcywh`]);
//! evaluation and overlap formulas work on corner boxes ([`BoxXyxy`]).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate box {0:?}: extents must be positive and finite")]
    Degenerate([f64; 4]),
    #[error("box center {0:?} lies outside the unit square")]
    CenterOutOfRange([f64; 4]),
}

/// Normalized center/extent box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner box, `x1 > x0` and `y1 > y0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Checked constructor used at ingestion: zero-area boxes are rejected.
    pub fn validated(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let raw = [cx, cy, w, h];
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::Degenerate(raw));
        }
        if !((0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy)) {
            return Err(GeometryError::CenterOutOfRange(raw));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn to_xyxy(&self) -> BoxXyxy {
        BoxXyxy {
            x0: self.cx - self.w / 2.0,
            y0: self.cy - self.h / 2.0,
            x1: self.cx + self.w / 2.0,
            y1: self.cy + self.h / 2.0,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl BoxXyxy {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn to_cxcywh(&self) -> BoxCxcywh {
        BoxCxcywh {
            cx: (self.x0 + self.x1) / 2.0,
            cy: (self.y0 + self.y1) / 2.0,
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    fn intersection(&self, o: &BoxXyxy) -> f64 {
        let iw = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0.0);
        let ih = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0.0);
        iw * ih
    }

    fn enclosing_area(&self, o: &BoxXyxy) -> f64 {
        (self.x1.max(o.x1) - self.x0.min(o.x0)) * (self.y1.max(o.y1) - self.y0.min(o.y0))
    }
}

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let enclosing = a.enclosing_area(b);
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclosing <= 0.0 {
        return iou;
    }
    iou - (enclosing - union) / enclosing
}

/// `|a| × |b|` matrix of IoU values, row-major.
pub fn pairwise_iou(a: &[BoxXyxy], b: &[BoxXyxy]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| b.iter().map(|y| iou(x, y)).collect())
        .collect()
}

/// `|a| × |b|` matrix of GIoU values, row-major.
pub fn pairwise_giou(a: &[BoxXyxy], b: &[BoxXyxy]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| b.iter().map(|y| giou(x, y)).collect())
        .collect()
}

/// Inverse of the logistic function, clamped away from 0 and 1.
pub(crate) fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxXyxy {
        BoxXyxy::new(x0, y0, x1, y1)
    }

    #[test]
    fn conversions() {
        assert_eq!(BoxCxcywh::new(0.5, 0.5, 1.0, 1.0).to_xyxy(), b(0.0, 0.0, 1.0, 1.0));
        assert_eq!(BoxCxcywh::new(0.25, 0.25, 0.5, 0.5).to_xyxy(), b(0.0, 0.0, 0.5, 0.5));
    }

    #[test]
    fn iou_examples() {
        let unit = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&unit, &unit), 1.0);
        assert_eq!(iou(&unit, &b(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert!((iou(&unit, &b(0.5, 0.0, 1.5, 1.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_raster_oracle() {
        // Count grid cells covered by both / either box on a 1000×1000 grid.
        let (a, c) = (b(0.0, 0.0, 1.0, 1.0), b(0.5, 0.0, 1.5, 1.0));
        let n = 1000;
        let (lo, hi) = (0.0, 1.5);
        let cell = (hi - lo) / n as f64;
        let (mut both, mut either) = (0u64, 0u64);
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * cell;
            for j in 0..n {
                let y = lo + (j as f64 + 0.5) * cell;
                let ina = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
                let inc = x >= c.x0 && x < c.x1 && y >= c.y0 && y < c.y1;
                both += (ina && inc) as u64;
                either += (ina || inc) as u64;
            }
        }
        let raster = both as f64 / either as f64;
        assert!((raster - 1.0 / 3.0).abs() < 1e-2);
        assert!((iou(&a, &c) - raster).abs() < 1e-2);
    }

    #[test]
    fn giou_examples() {
        let unit = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&unit, &unit), 1.0);
        // IoU 0, enclosing area 3, union 2.
        assert!((giou(&unit, &b(2.0, 0.0, 3.0, 1.0)) + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn giou_tends_to_minus_one_with_separation() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        let mut prev = f64::INFINITY;
        for k in 1..200 {
            let d = k as f64 * 0.5;
            let g = giou(&a, &b(d, 0.0, d + 1.0, 1.0));
            assert!(g <= prev);
            prev = g;
        }
        assert!(prev > -1.0 && prev < -0.98);
    }

    #[test]
    fn pairwise_shapes() {
        let a = vec![b(0.0, 0.0, 1.0, 1.0); 3];
        let c = vec![b(0.0, 0.0, 0.5, 0.5); 2];
        let m = pairwise_iou(&a, &c);
        assert_eq!((m.len(), m[0].len()), (3, 2));
        assert_eq!(pairwise_giou(&a, &c)[2][1], 0.25);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BoxCxcywh::validated(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BoxCxcywh::validated(0.5, 0.5, 0.1, f64::NAN).is_err());
        assert!(BoxCxcywh::validated(1.5, 0.5, 0.1, 0.1).is_err());
        assert!(BoxCxcywh::validated(0.5, 0.5, 0.1, 0.1).is_ok());
    }

    fn arb_box() -> impl Strategy<Value = BoxXyxy> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn roundtrip_cxcywh(cx in 0.0..1.0f64, cy in 0.0..1.0f64, w in 0.001..1.0f64, h in 0.001..1.0f64) {
            let bx = BoxCxcywh::new(cx, cy, w, h);
            let back = bx.to_xyxy().to_cxcywh();
            prop_assert!((back.cx - cx).abs() < 1e-12 && (back.cy - cy).abs() < 1e-12);
            prop_assert!((back.w - w).abs() < 1e-12 && (back.h - h).abs() < 1e-12);
        }

        #[test]
        fn giou_bounded_by_iou(a in arb_box(), c in arb_box()) {
            let (i, g) = (iou(&a, &c), giou(&a, &c));
            prop_assert!(g <= i + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0);
            prop_assert!((0.0..=1.0).contains(&i));
        }

        #[test]
        fn iou_symmetric_and_similarity_invariant(a in arb_box(), c in arb_box(),
                                                  tx in -2.0..2.0f64, ty in -2.0..2.0f64, s in 0.1..10.0f64) {
            prop_assert!((iou(&a, &c) - iou(&c, &a)).abs() < 1e-12);
            let t = |q: &BoxXyxy| b(q.x0 * s + tx, q.y0 * s + ty, q.x1 * s + tx, q.y1 * s + ty);
            prop_assert!((iou(&a, &c) - iou(&t(&a), &t(&c))).abs() < 1e-9);
        }

        #[test]
        fn giou_equals_iou_when_union_fills_enclosure(x in 0.0..1.0f64, w in 0.1..1.0f64, w2 in 0.1..1.0f64) {
            // Nested boxes: the union is the outer box, which is also the enclosure.
            let outer = b(x, 0.0, x + w + w2, 1.0);
            let inner = b(x, 0.0, x + w, 1.0);
            prop_assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < 1e-12);
        }
    }
}
