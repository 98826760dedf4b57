//! Rotated-rectangle overlap via Sutherland–Hodgman clipping of the two
//! convex footprints.

use super::box3d::Box3D;
use crate::error::Result;

const VERTEX_EPS: f64 = 1e-9;

type Pt = [f64; 2];

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice.abs()
}

fn line_intersection(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    let (dp, dq) = (cross(a, b, p), cross(a, b, q));
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection of two convex polygons given counter-clockwise.
pub fn clip_convex(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out: Vec<Pt> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let input = std::mem::take(&mut out);
        let n = input.len();
        for j in 0..n {
            let (p, q) = (input[j], input[(j + 1) % n]);
            let p_in = cross(a, b, p) >= -VERTEX_EPS;
            let q_in = cross(a, b, q) >= -VERTEX_EPS;
            match (p_in, q_in) {
                (true, true) => out.push(q),
                (true, false) => out.push(line_intersection(p, q, a, b)),
                (false, true) => {
                    out.push(line_intersection(p, q, a, b));
                    out.push(q);
                }
                (false, false) => {}
            }
        }
    }
    out
}

/// Footprint intersection area, skipping the clipper when the bounding
/// circles are apart.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let d = (a.cx - b.cx).hypot(a.cy - b.cy);
    if d >= a.bev_radius() + b.bev_radius() {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

pub(crate) fn bev_iou_unchecked(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub(crate) fn iou3d_unchecked(a: &Box3D, b: &Box3D) -> f64 {
    let dz = (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Bird's-eye-view IoU of the two yaw-rotated footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(bev_iou_unchecked(a, b))
}

/// Volumetric IoU: footprint intersection times vertical overlap.
pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou3d_unchecked(a, b))
}
