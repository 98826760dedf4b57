//! Anchor-relative box residuals.
//!
//! Centre offsets are scaled by the anchor footprint diagonal (x, y) and the
//! anchor height (z); sizes are log-ratios. The angle residual is the sine of
//! the yaw difference after folding it into `[-π/2, π/2]`: a box and its
//! π-rotation share a footprint, so the fold loses nothing geometric, and the
//! direction classifier bit carries the folded-away half turn.

use std::f64::consts::{FRAC_PI_2, PI};

use super::box3d::{normalize_angle, Box3D};

pub const CODE_SIZE: usize = 7;

/// `(Δx, Δy, Δz, Δw, Δl, Δh, Δθ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget(pub [f64; CODE_SIZE]);

impl RegressionTarget {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// `true` when the ground-truth heading lies within a quarter turn of the
/// anchor's.
pub fn direction_target(gt_yaw: f64, anchor_yaw: f64) -> bool {
    (gt_yaw - anchor_yaw).cos() >= 0.0
}

/// Yaw difference folded into `[-π/2, π/2)`.
fn folded_delta(gt_yaw: f64, anchor_yaw: f64) -> f64 {
    let d = normalize_angle(gt_yaw - anchor_yaw);
    if d >= FRAC_PI_2 {
        d - PI
    } else if d < -FRAC_PI_2 {
        d + PI
    } else {
        d
    }
}

pub fn encode_targets(gt: &Box3D, anchor: &Box3D) -> RegressionTarget {
    let diag = anchor.w.hypot(anchor.l);
    RegressionTarget([
        (gt.cx - anchor.cx) / diag,
        (gt.cy - anchor.cy) / diag,
        (gt.cz - anchor.cz) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.l / anchor.l).ln(),
        (gt.h / anchor.h).ln(),
        folded_delta(gt.yaw, anchor.yaw).sin(),
    ])
}

/// Inverse of [`encode_targets`]; `dir_positive = false` adds a half turn.
/// `|Δθ| > 1` is clamped.
pub fn decode_targets(t: &RegressionTarget, anchor: &Box3D, dir_positive: bool) -> Box3D {
    let [dx, dy, dz, dw, dl, dh, dtheta] = t.0;
    let diag = anchor.w.hypot(anchor.l);
    let s = if dtheta.abs() > 1.0 {
        log::warn!("angle residual {dtheta} outside [-1, 1]; clamped");
        dtheta.clamp(-1.0, 1.0)
    } else {
        dtheta
    };
    let mut yaw = anchor.yaw + s.asin();
    if !dir_positive {
        yaw += PI;
    }
    Box3D {
        cx: anchor.cx + dx * diag,
        cy: anchor.cy + dy * diag,
        cz: anchor.cz + dz * anchor.h,
        w: anchor.w * dw.exp(),
        l: anchor.l * dl.exp(),
        h: anchor.h * dh.exp(),
        yaw: normalize_angle(yaw),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn anchor() -> Box3D {
        Box3D::new(10.0, -2.0, -1.0, 1.6, 3.9, 1.56, 0.0).unwrap()
    }

    #[test]
    fn identical_box_encodes_to_zero() {
        let a = anchor();
        assert_eq!(encode_targets(&a, &a).0, [0.0; 7]);
        let back = decode_targets(&RegressionTarget([0.0; 7]), &a, true);
        assert_eq!(back, a);
    }

    #[test]
    fn doubled_width_is_ln2() {
        let a = anchor();
        let mut g = a;
        g.w *= 2.0;
        assert!((encode_targets(&g, &a).0[3] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn direction_bit_flips_by_half_turn() {
        let a = anchor();
        for dtheta in [0.0, 0.3, -0.8] {
            let t = RegressionTarget([0.1, 0.0, 0.0, 0.0, 0.0, 0.0, dtheta]);
            let p = decode_targets(&t, &a, true);
            let n = decode_targets(&t, &a, false);
            let diff = normalize_angle(n.yaw - p.yaw);
            assert!((diff.abs() - PI).abs() < 1e-12, "{diff}");
        }
    }

    #[test]
    fn out_of_range_angle_residual_is_clamped() {
        let t = RegressionTarget([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.7]);
        let b = decode_targets(&t, &anchor(), true);
        assert!((b.yaw - FRAC_PI_2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn roundtrip_with_true_direction_bit(
            x in -5.0f64..5.0, y in -5.0f64..5.0, z in -0.5f64..0.5,
            w in 1.0f64..2.5, l in 3.0f64..5.0, h in 1.2f64..2.0,
            yaw in -PI..PI, ayaw in prop::sample::select(vec![0.0, FRAC_PI_2]),
        ) {
            let a = Box3D::new(1.0, -1.0, -1.0, 1.6, 3.9, 1.56, ayaw).unwrap();
            let g = Box3D::new(x, y, z, w, l, h, yaw).unwrap();
            let t = encode_targets(&g, &a);
            prop_assert!(t.is_finite());
            let d = decode_targets(&t, &a, direction_target(g.yaw, a.yaw));
            for (p, q) in d.to_array()[..6].iter().zip(&g.to_array()[..6]) {
                prop_assert!((p - q).abs() < 1e-9);
            }
            prop_assert!(normalize_angle(d.yaw - g.yaw).abs() < 1e-9);
        }
    }
}
