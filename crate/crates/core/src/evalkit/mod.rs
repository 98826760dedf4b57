//! KITTI-style scoring: greedy IoU matching, AP over 40 recall positions,
//! interpolated precision at fixed recall, and TP/FP/background-FP counts.
//!
//! Boxes are scored in the label (rectified camera) frame, so neither the
//! detections nor the labels need calibration.

mod report;

use serde::{Deserialize, Serialize};

pub use report::{
    evaluate, load_eval_frames, ApRow, EvalFrame, EvalOptions, EvalReport, FpRow, PrecisionRow,
};

use crate::dataset::{IGNORED_CLASSES, VEHICLE_CLASS};
use crate::error::{Error, Result};
use crate::geom::{bev_iou, iou3d, Box3D};
use crate::kittio::GroundTruthLabel;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.7;
pub const DONT_CARE_IOU: f64 = 0.5;
pub const RECALL_POSITIONS: [f64; 4] = [0.725, 0.75, 0.775, 0.8];
pub const NUM_AP_POSITIONS: usize = 40;
pub const DEFAULT_BG_IOU_CUTOFF: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }

    /// `(min 2D box height px, max occlusion level, max truncation)`.
    pub fn thresholds(self) -> (f64, i32, f64) {
        match self {
            Difficulty::Easy => (40.0, 0, 0.15),
            Difficulty::Moderate => (25.0, 1, 0.30),
            Difficulty::Hard => (25.0, 2, 0.50),
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown difficulty {s:?}")))
    }
}

pub fn difficulty_filter(gt: &GroundTruthLabel, level: Difficulty) -> bool {
    let (h, occ, trunc) = level.thresholds();
    gt.bbox_height() >= h && gt.occlusion <= occ && gt.truncation <= trunc
}

/// Label box in a right-handed frame built from the camera axes
/// `(x, z, -y)`: the footprint lies in the camera x–z plane and height is
/// measured upwards. `None` for rows without a 3D box.
pub fn label_eval_box(l: &GroundTruthLabel) -> Option<Box3D> {
    if !l.has_valid_box() {
        return None;
    }
    let [h, w, len] = l.dims;
    let [x, y, z] = l.location;
    Box3D::new(x, z, -(y - h / 2.0), w, len, h, -l.rotation_y).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IouKind {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "bev")]
    Bev,
}

impl IouKind {
    pub const ALL: [IouKind; 2] = [IouKind::ThreeD, IouKind::Bev];

    pub fn name(self) -> &'static str {
        match self {
            IouKind::ThreeD => "3d",
            IouKind::Bev => "bev",
        }
    }

    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouKind::ThreeD => iou3d(a, b),
            IouKind::Bev => bev_iou(a, b),
        }
        .unwrap_or(0.0)
    }
}

impl std::str::FromStr for IouKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IouKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown IoU kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: Box3D,
    pub score: f64,
}

/// A box to match against. Uncounted boxes absorb matches without
/// producing true positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGt {
    pub bbox: Box3D,
    pub counted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchTag {
    Tp,
    Fp,
    /// Matched an uncounted box or fell in a don't-care region.
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetMatch {
    pub score: f64,
    pub tag: MatchTag,
    pub gt: Option<usize>,
    /// Largest overlap with any box in the frame.
    pub max_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub dets: Vec<DetMatch>,
    /// Counted boxes, the recall denominator.
    pub num_gt: usize,
}

/// Greedy matching in detection order: each detection takes the unmatched
/// box of highest IoU at or above `iou_threshold`. Unmatched detections
/// overlapping a don't-care box by more than [`DONT_CARE_IOU`] (BEV) are
/// discarded, the rest are false positives.
pub fn match_frame(
    dets: &[ScoredBox],
    gts: &[EvalGt],
    dont_care: &[Box3D],
    iou_fn: impl Fn(&Box3D, &Box3D) -> f64,
    iou_threshold: f64,
) -> Result<MatchResult> {
    if dets.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(Error::contract("detections must be sorted by descending score"));
    }
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let ious: Vec<f64> = gts.iter().map(|g| iou_fn(&d.bbox, &g.bbox)).collect();
        let max_iou = ious.iter().copied().fold(0.0, f64::max);
        let mut best: Option<usize> = None;
        for (j, &v) in ious.iter().enumerate() {
            if !taken[j] && v >= iou_threshold && best.is_none_or(|b| v > ious[b]) {
                best = Some(j);
            }
        }
        let tag = match best {
            Some(j) => {
                taken[j] = true;
                if gts[j].counted {
                    MatchTag::Tp
                } else {
                    MatchTag::Discarded
                }
            }
            None if dont_care.iter().any(|b| bev_iou(&d.bbox, b).unwrap_or(0.0) > DONT_CARE_IOU) => {
                MatchTag::Discarded
            }
            None => MatchTag::Fp,
        };
        out.push(DetMatch { score: d.score, tag, gt: best, max_iou });
    }
    Ok(MatchResult { dets: out, num_gt: gts.iter().filter(|g| g.counted).count() })
}

/// Cumulative counts when keeping every detection scoring at least
/// `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

impl PrPoint {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }
}

/// Precision/recall at every distinct score, thresholds descending.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub num_gt: usize,
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    pub fn recall(&self, p: &PrPoint) -> f64 {
        p.tp as f64 / self.num_gt as f64
    }

    /// Largest precision among points whose recall is at least `r`, `None`
    /// if the curve never gets there.
    pub fn interpolated_precision(&self, r: f64) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.tp as f64 >= r * self.num_gt as f64 - 1e-9)
            .map(|p| p.precision())
            .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))))
    }
}

pub fn pr_curve(results: &[MatchResult]) -> Result<PrCurve> {
    let num_gt: usize = results.iter().map(|r| r.num_gt).sum();
    if num_gt == 0 {
        return Err(Error::Undefined("precision/recall without any ground truth".into()));
    }
    let mut scored: Vec<(f64, bool)> = results
        .iter()
        .flat_map(|r| &r.dets)
        .filter(|d| d.tag != MatchTag::Discarded)
        .map(|d| (d.score, d.tag == MatchTag::Tp))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points: Vec<PrPoint> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, &(s, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        // ties enter together
        if scored.get(i + 1).is_none_or(|n| n.0 != s) {
            points.push(PrPoint { threshold: s, tp, fp });
        }
    }
    Ok(PrCurve { num_gt, points })
}

/// Mean interpolated precision at recalls 1/40, 2/40, …, 1; unreachable
/// positions contribute zero.
pub fn ap40_curve(curve: &PrCurve) -> f64 {
    let n = NUM_AP_POSITIONS;
    let mut total = 0.0;
    for k in 1..=n {
        // recall ≥ k/n compared in integers
        total += curve
            .points
            .iter()
            .filter(|p| p.tp * n >= k * curve.num_gt)
            .map(|p| p.precision())
            .fold(0.0, f64::max);
    }
    total / n as f64
}

pub fn ap40(results: &[MatchResult]) -> Result<f64> {
    Ok(ap40_curve(&pr_curve(results)?))
}

/// Interpolated precision at each requested recall; `None` marks a position
/// the curve never reaches.
pub fn precision_at_recall(curve: &PrCurve, positions: &[f64]) -> Vec<Option<f64>> {
    positions.iter().map(|&r| curve.interpolated_precision(r)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FpCounts {
    pub tp: usize,
    pub fp: usize,
    /// False positives overlapping no object (any class) by more than the
    /// background cutoff.
    pub fp_bg: usize,
}

impl std::ops::AddAssign for FpCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fp_bg += o.fp_bg;
    }
}

/// Counts over detections scoring at least `score_threshold`. `gts` are the
/// matchable boxes; `objects` every annotated object of any class, used for
/// the background test `max BEV IoU ≤ bg_iou_cutoff`.
#[allow(clippy::too_many_arguments)]
pub fn fp_accounting(
    dets: &[ScoredBox],
    gts: &[EvalGt],
    objects: &[Box3D],
    dont_care: &[Box3D],
    score_threshold: f64,
    bg_iou_cutoff: f64,
    iou_kind: IouKind,
    iou_threshold: f64,
) -> Result<FpCounts> {
    let kept: Vec<ScoredBox> = dets.iter().filter(|d| d.score >= score_threshold).copied().collect();
    let m = match_frame(&kept, gts, dont_care, |a, b| iou_kind.iou(a, b), iou_threshold)?;
    let mut c = FpCounts::default();
    for (d, r) in kept.iter().zip(&m.dets) {
        match r.tag {
            MatchTag::Tp => c.tp += 1,
            MatchTag::Fp => {
                c.fp += 1;
                let bg = objects.iter().map(|o| bev_iou(&d.bbox, o).unwrap_or(0.0)).fold(0.0, f64::max);
                if bg <= bg_iou_cutoff {
                    c.fp_bg += 1;
                }
            }
            MatchTag::Discarded => {}
        }
    }
    Ok(c)
}

/// `100 · (before − after) / before`.
pub fn reduction_percent(before: usize, after: usize) -> Result<f64> {
    if before == 0 {
        return Err(Error::Undefined("reduction relative to a zero count".into()));
    }
    Ok(100.0 * (before as f64 - after as f64) / before as f64)
}

/// FP and background-FP reductions of `ours` relative to `baseline`, in
/// percent.
pub fn fp_reduction(baseline: FpCounts, ours: FpCounts) -> Result<(f64, f64)> {
    Ok((reduction_percent(baseline.fp, ours.fp)?, reduction_percent(baseline.fp_bg, ours.fp_bg)?))
}

pub fn format_percent(v: f64) -> String {
    format!("{v:.2}%")
}

/// Matching inputs of one label file at one difficulty: vehicles inside the
/// filter are counted, other vehicles and ignored classes only absorb
/// matches. `None` counts every vehicle.
pub fn eval_gts(labels: &[GroundTruthLabel], level: Option<Difficulty>) -> Vec<EvalGt> {
    labels
        .iter()
        .filter_map(|l| {
            let b = label_eval_box(l)?;
            if l.class == VEHICLE_CLASS {
                Some(EvalGt { bbox: b, counted: level.is_none_or(|d| difficulty_filter(l, d)) })
            } else if IGNORED_CLASSES.contains(&l.class.as_str()) {
                Some(EvalGt { bbox: b, counted: false })
            } else {
                None
            }
        })
        .collect()
}

pub fn dont_care_boxes(labels: &[GroundTruthLabel]) -> Vec<Box3D> {
    labels.iter().filter(|l| l.is_dont_care()).filter_map(label_eval_box).collect()
}

/// Every annotated object except don't-care regions.
pub fn object_boxes(labels: &[GroundTruthLabel]) -> Vec<Box3D> {
    labels.iter().filter(|l| !l.is_dont_care()).filter_map(label_eval_box).collect()
}

/// Vehicle detections of a result file, by descending score (stable).
pub fn scored_detections(rows: &[GroundTruthLabel]) -> Vec<ScoredBox> {
    let mut v: Vec<ScoredBox> = rows
        .iter()
        .filter(|l| l.class == VEHICLE_CLASS)
        .filter_map(|l| Some(ScoredBox { bbox: label_eval_box(l)?, score: l.score.unwrap_or(1.0) }))
        .collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v
}

#[cfg(test)]
mod tests;
