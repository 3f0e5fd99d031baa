//! Oriented 3D boxes and rotated-rectangle overlap in the ground plane.
//!
//! Intersection of two rotated rectangles is computed by Sutherland-Hodgman
//! clipping of one convex quad against the other's four half-planes, with an
//! area epsilon absorbing near-degenerate contact. Heading is irrelevant to
//! overlap (rectangles are symmetric under pi flips), so IoU ignores it.

use crate::error::{Error, Result};

/// Area below which a clipped intersection polygon counts as empty.
pub const AREA_EPS: f64 = 1e-9;

/// 7-parameter oriented box: center, sizes, heading about the vertical axis.
///
/// `length` runs along the heading direction, `width` across it. The heading
/// is normalized to `[-pi, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn new(cx: f64, cy: f64, cz: f64, w: f64, l: f64, h: f64, theta: f64) -> Result<Self> {
        if !(w > 0.0 && l > 0.0 && h > 0.0) {
            return Err(Error::DegenerateBox);
        }
        if ![cx, cy, cz, w, l, h, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box3d", "non-finite field"));
        }
        Ok(Box3D {
            cx,
            cy,
            cz,
            w,
            l,
            h,
            theta: normalize_angle(theta),
        })
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        // Local (u along heading, v across), CCW.
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.cx + c * u - s * v, self.cy + s * u + c * v])
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.cz - self.h / 2.0, self.cz + self.h / 2.0)
    }

    /// Whether the BEV projection of `p` falls inside the footprint.
    pub fn contains_bev(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (px - self.cx, py - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0
    }

    pub fn contains(&self, px: f64, py: f64, pz: f64) -> bool {
        let (z0, z1) = self.z_range();
        pz >= z0 && pz <= z1 && self.contains_bev(px, py)
    }
}

/// Wrap an angle into `[-pi, pi)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta.rem_euclid(two_pi);
    if t >= std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Signed polygon area via the shoelace formula (positive when CCW).
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// Clip a convex polygon against the half-plane left of edge `a -> b`.
fn clip_halfplane(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2], out: &mut Vec<[f64; 2]>) {
    out.clear();
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        let (sc, sn) = (side(cur), side(next));
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0) {
            let t = sc / (sc - sn);
            out.push([
                cur[0] + t * (next[0] - cur[0]),
                cur[1] + t * (next[1] - cur[1]),
            ]);
        }
    }
}

/// Area of intersection of two convex CCW polygons.
fn convex_intersection_area(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> f64 {
    let mut poly = subject.to_vec();
    let mut scratch = Vec::with_capacity(subject.len() + clip.len());
    for i in 0..clip.len() {
        if poly.is_empty() {
            return 0.0;
        }
        clip_halfplane(&poly, clip[i], clip[(i + 1) % clip.len()], &mut scratch);
        std::mem::swap(&mut poly, &mut scratch);
    }
    let area = polygon_area(&poly).abs();
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

/// BEV intersection area of two boxes' rotated footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    convex_intersection_area(&a.bev_corners(), &b.bev_corners())
}

fn check_boxes(a: &Box3D, b: &Box3D) -> Result<()> {
    if a.bev_area() < AREA_EPS || b.bev_area() < AREA_EPS || a.h <= 0.0 || b.h <= 0.0 {
        return Err(Error::DegenerateBox);
    }
    Ok(())
}

/// Rotated intersection-over-union of the BEV footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    check_boxes(a, b)?;
    let inter = bev_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// 3D intersection-over-union: BEV overlap times vertical overlap, over the
/// volume union.
pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    check_boxes(a, b)?;
    let (az0, az1) = a.z_range();
    let (bz0, bz1) = b.z_range();
    let zo = (az1.min(bz1) - az0.max(bz0)).max(0.0);
    let inter = bev_intersection(a, b) * zo;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, l: f64, theta: f64) -> Box3D {
        Box3D::new(cx, cy, 0.0, w, l, 1.0, theta).unwrap()
    }

    #[test]
    fn identical_boxes_iou_one() {
        let a = bx(1.0, 2.0, 0.6, 0.8, 0.3);
        assert!((bev_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((iou3d(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn axis_aligned_offset_closed_form() {
        // Unit squares offset 0.5 in x: inter 0.5, union 1.5.
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((bev_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn rotated_square_closed_form() {
        // Unit square vs itself rotated 45 degrees: intersection is a
        // regular octagon of area 2*(sqrt(2)-1).
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        let inter = bev_intersection(&a, &b);
        let expect = 2.0 * (2.0f64.sqrt() - 1.0);
        assert!((inter - expect).abs() < 1e-9, "inter {inter} vs {expect}");
    }

    #[test]
    fn disjoint_z_means_zero_3d() {
        let a = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        let b = Box3D::new(0.0, 0.0, 5.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(iou3d(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(Box3D::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0).is_err());
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let mut zero = a;
        zero.w = 0.0;
        assert!(bev_iou(&a, &zero).is_err());
    }

    #[test]
    fn theta_normalized_at_construction() {
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 3.5 * std::f64::consts::PI).unwrap();
        assert!(b.theta >= -std::f64::consts::PI && b.theta < std::f64::consts::PI);
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(
            ax in -5.0..5.0f64, ay in -5.0..5.0f64,
            aw in 0.2..3.0f64, al in 0.2..3.0f64, at in -3.2..3.2f64,
            dx in -2.0..2.0f64, dy in -2.0..2.0f64,
            bw in 0.2..3.0f64, bl in 0.2..3.0f64, bt in -3.2..3.2f64,
        ) {
            let a = bx(ax, ay, aw, al, at);
            let b = bx(ax + dx, ay + dy, bw, bl, bt);
            let ab = bev_iou(&a, &b).unwrap();
            let ba = bev_iou(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_rigid_motion_invariant(
            dx in -2.0..2.0f64, dy in -2.0..2.0f64,
            rot in -3.0..3.0f64, tx in -10.0..10.0f64, ty in -10.0..10.0f64,
        ) {
            let a = bx(0.0, 0.0, 0.6, 0.8, 0.4);
            let b = bx(dx, dy, 1.1, 0.7, -0.9);
            let before = bev_iou(&a, &b).unwrap();
            let (s, c) = rot.sin_cos();
            let mv = |v: &Box3D| bx(
                c * v.cx - s * v.cy + tx,
                s * v.cx + c * v.cy + ty,
                v.w, v.l, v.theta + rot,
            );
            let after = bev_iou(&mv(&a), &mv(&b)).unwrap();
            prop_assert!((before - after).abs() < 1e-9, "{before} vs {after}");
        }
    }
}
