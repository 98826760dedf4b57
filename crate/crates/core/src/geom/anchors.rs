//! Per-cell anchor pairs and IoU-based target assignment.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::box3d::Box3D;
use super::iou::{bev_intersection, bev_iou_unchecked};
use crate::error::{Error, Result};

/// Anchor geometry and matcher thresholds. Defaults follow the common
/// car-anchor convention for pillar detectors; the thresholds are not
/// dictated by anything in the fusion design and may be tuned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// (w, l, h) in metres.
    pub size: [f64; 3],
    pub z_center: f64,
    pub rotations: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            size: [1.6, 3.9, 1.56],
            z_center: -1.0,
            rotations: vec![0.0, FRAC_PI_2],
            pos_iou: 0.6,
            neg_iou: 0.45,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("anchor size {:?} must be positive", self.size)));
        }
        if self.rotations.is_empty() {
            return Err(Error::Config("anchor rotations must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.neg_iou) || !(self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= neg_iou ({}) <= pos_iou ({}) <= 1",
                self.neg_iou, self.pos_iou
            )));
        }
        Ok(())
    }
}

/// Anchors on the cell centres of an `ny × nx` output grid spanning
/// `x_range × y_range`. Index = `(iy·nx + ix)·R + r`.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub anchors: Vec<Box3D>,
    pub nx: usize,
    pub ny: usize,
    pub per_cell: usize,
    pub stride: [f64; 2],
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn build_anchor_grid(
    cfg: &AnchorConfig,
    x_range: [f64; 2],
    y_range: [f64; 2],
    nx: usize,
    ny: usize,
) -> Result<AnchorGrid> {
    cfg.validate()?;
    if nx == 0 || ny == 0 || !(x_range[1] > x_range[0]) || !(y_range[1] > y_range[0]) {
        return Err(Error::Config(format!(
            "anchor grid {nx}x{ny} over {x_range:?} × {y_range:?}"
        )));
    }
    let sx = (x_range[1] - x_range[0]) / nx as f64;
    let sy = (y_range[1] - y_range[0]) / ny as f64;
    let [w, l, h] = cfg.size;
    let mut anchors = Vec::with_capacity(nx * ny * cfg.rotations.len());
    for iy in 0..ny {
        for ix in 0..nx {
            let cx = x_range[0] + (ix as f64 + 0.5) * sx;
            let cy = y_range[0] + (iy as f64 + 0.5) * sy;
            for &r in &cfg.rotations {
                anchors.push(Box3D::new(cx, cy, cfg.z_center, w, l, h, r)?);
            }
        }
    }
    Ok(AnchorGrid {
        anchors,
        nx,
        ny,
        per_cell: cfg.rotations.len(),
        stride: [sx, sy],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive(_))
    }
}

/// BEV-IoU matcher: an anchor is positive for its best ground truth when the
/// IoU reaches `pos_iou`, negative below `neg_iou`, ignored in between. Each
/// ground truth additionally claims its single best-overlapping anchor so
/// that no object goes unassigned on coarse grids.
pub fn assign_targets(grid: &AnchorGrid, gts: &[Box3D], cfg: &AnchorConfig) -> Vec<AnchorLabel> {
    let n = grid.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut gt_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gts.len()];
    for (ai, a) in grid.anchors.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            if (a.cx - g.cx).hypot(a.cy - g.cy) >= a.bev_radius() + g.bev_radius() {
                continue;
            }
            if bev_intersection(a, g) <= 0.0 {
                continue;
            }
            let iou = bev_iou_unchecked(a, g);
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = gi;
            }
            if iou > gt_best[gi].0 {
                gt_best[gi] = (iou, ai);
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = (0..n)
        .map(|ai| {
            if best_gt[ai] != usize::MAX && best_iou[ai] >= cfg.pos_iou {
                AnchorLabel::Positive(best_gt[ai])
            } else if best_iou[ai] < cfg.neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for (gi, &(iou, ai)) in gt_best.iter().enumerate() {
        if ai != usize::MAX && iou > 0.0 && !labels[ai].is_positive() {
            labels[ai] = AnchorLabel::Positive(gi);
        }
    }
    labels
}
