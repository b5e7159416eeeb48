use serde::{Deserialize, Serialize};

use super::Projection2D;
use crate::error::{Error, Result};

/// Axis-aligned box by center and extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub u_mid: f64,
    pub v_mid: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox2D {
    pub fn from_extents(u_min: f64, u_max: f64, v_min: f64, v_max: f64) -> Self {
        Self {
            u_mid: 0.5 * (u_min + u_max),
            v_mid: 0.5 * (v_min + v_max),
            w: (u_max - u_min).max(0.0),
            h: (v_max - v_min).max(0.0),
        }
    }

    pub fn u_min(&self) -> f64 {
        self.u_mid - 0.5 * self.w
    }

    pub fn u_max(&self) -> f64 {
        self.u_mid + 0.5 * self.w
    }

    pub fn v_min(&self) -> f64 {
        self.v_mid - 0.5 * self.h
    }

    pub fn v_max(&self) -> f64 {
        self.v_mid + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.u_mid, self.v_mid, self.w, self.h]
    }

    /// Grows each side by `margin` pixels.
    pub fn expanded(&self, margin: f64) -> Self {
        Self {
            w: self.w + 2.0 * margin,
            h: self.h + 2.0 * margin,
            ..*self
        }
    }
}

/// Tight box over continuous coordinates: `w = max u - min u`.
pub fn tight_bbox(proj: &Projection2D) -> Result<BBox2D> {
    tight_bbox_of(&proj.points2d)
}

pub(crate) fn tight_bbox_of(points: &[[f64; 2]]) -> Result<BBox2D> {
    let first = points.first().ok_or(Error::EmptyInput("projection"))?;
    let (mut u0, mut u1, mut v0, mut v1) = (first[0], first[0], first[1], first[1]);
    for p in &points[1..] {
        u0 = u0.min(p[0]);
        u1 = u1.max(p[0]);
        v0 = v0.min(p[1]);
        v1 = v1.max(p[1]);
    }
    Ok(BBox2D::from_extents(u0, u1, v0, v1))
}

/// Intersection over union; zero when the union has no area.
pub fn iou(a: &BBox2D, b: &BBox2D) -> f64 {
    let iw = (a.u_max().min(b.u_max()) - a.u_min().max(b.u_min())).max(0.0);
    let ih = (a.v_max().min(b.v_max()) - a.v_min().max(b.v_min())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proj(pts: &[[f64; 2]]) -> Projection2D {
        Projection2D {
            points2d: pts.to_vec(),
        }
    }

    #[test]
    fn degenerate_single_point() {
        let b = tight_bbox(&proj(&[[5.0, 7.0]])).unwrap();
        assert_eq!(b, BBox2D { u_mid: 5.0, v_mid: 7.0, w: 0.0, h: 0.0 });
    }

    #[test]
    fn two_corner_points() {
        let b = tight_bbox(&proj(&[[10.0, 20.0], [30.0, 60.0]])).unwrap();
        assert_eq!(b.to_array(), [20.0, 40.0, 20.0, 40.0]);
        let with_interior = tight_bbox(&proj(&[[10.0, 20.0], [30.0, 60.0], [15.0, 33.0]])).unwrap();
        assert_eq!(with_interior, b);
    }

    #[test]
    fn empty_projection_errors() {
        assert!(matches!(tight_bbox(&proj(&[])), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn iou_hand_cases() {
        let a = BBox2D::from_extents(0.0, 1.0, 0.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox2D::from_extents(3.0, 4.0, 0.0, 1.0);
        assert_eq!(iou(&a, &far), 0.0);
        let shifted = BBox2D::from_extents(0.5, 1.5, 0.0, 1.0);
        assert!((iou(&a, &shifted) - 0.5 / 1.5).abs() < 1e-15);
        assert_eq!(iou(&a, &shifted), iou(&shifted, &a));
        let point = BBox2D::from_extents(0.0, 0.0, 0.0, 0.0);
        assert_eq!(iou(&point, &point), 0.0);
    }
}
