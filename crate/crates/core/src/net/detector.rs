use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use super::head::{Head, HeadOutput};
use super::loss::{dir_loss, focal_loss, smooth_l1_loc_loss, total_loss, FocalParams, LossWeights};
use super::optim::Adam;
use crate::dataset::Frame;
use crate::diffcore::{join, zero_grads, Module, Tensor, Visitor, VisitorMut};
use crate::error::{Error, Result};
use crate::fusion::{batch_rgb, FusionMode, PillarEncoder};
use crate::geom::{
    assign_targets, bev_iou, build_anchor_grid, decode_targets, direction_target, encode_targets, rotated_nms,
    AnchorConfig, AnchorGrid, AnchorLabel, Box3D, RegressionTarget, CODE_SIZE,
};
use crate::pillars::{build_pillar_batch, decorate_points, scatter_to_pseudo_image, PillarGridConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fusion: FusionMode,
    pub pillars: PillarGridConfig,
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub loss: LossWeights,
    pub focal: FocalParams,
}

impl Default for ModelConfig {
    /// Desk scale: an 8 m × 8 m area in 1 m pillars.
    fn default() -> Self {
        Self {
            fusion: FusionMode::Baseline,
            pillars: PillarGridConfig {
                x_range: [0.0, 8.0],
                y_range: [-4.0, 4.0],
                z_range: [-3.0, 1.0],
                pillar_size: 1.0,
                max_pillars: 64,
                max_points: 32,
            },
            backbone: BackboneConfig::desk(),
            anchors: AnchorConfig::default(),
            loss: LossWeights::default(),
            focal: FocalParams::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.pillars.validate()?;
        self.backbone.validate()?;
        self.anchors.validate()?;
        self.loss.validate()?;
        self.backbone.output_size(self.pillars.ny(), self.pillars.nx())?;
        Ok(())
    }

    /// Output-grid size `(ny, nx)` the anchors live on.
    pub fn feature_size(&self) -> Result<(usize, usize)> {
        self.backbone.output_size(self.pillars.ny(), self.pillars.nx())
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        let (ny, nx) = self.feature_size()?;
        build_anchor_grid(&self.anchors, self.pillars.x_range, self.pillars.y_range, nx, ny)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Highest-scoring candidates kept before NMS.
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            nms_threshold: 0.1,
            pre_nms_top_k: 1000,
            max_detections: 100,
        }
    }
}

/// Pillar encoder, 2D backbone and detection head over a fixed anchor grid.
#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub encoder: PillarEncoder,
    pub backbone: Backbone,
    pub head: Head,
    pub anchors: AnchorGrid,
}

impl Detector {
    /// Parameters drawn from a ChaCha8 stream seeded by `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = PillarEncoder::new(cfg.fusion, &mut rng);
        let backbone = Backbone::new(&mut rng, encoder.out_channels(), &cfg.backbone)?;
        let head = Head::new(&mut rng, backbone.out_channels(), cfg.anchors.rotations.len());
        let anchors = cfg.anchor_grid()?;
        Ok(Self { cfg, encoder, backbone, head, anchors })
    }

    /// Pillar pseudo-image `[C, ny, nx]`. `seed` drives pillar/point
    /// subsampling when the grid limits overflow.
    pub fn pseudo_image(&self, frame: &Frame, training: bool, seed: u64) -> Result<Tensor> {
        let pc = &self.cfg.pillars;
        let dec = decorate_points(&frame.cloud.points, pc)?;
        let batch = build_pillar_batch(&dec, pc, seed)?;
        let rgb = if frame.cloud.rgb.len() == frame.cloud.points.len() {
            batch_rgb(&batch, &dec.source, &frame.cloud.rgb)?
        } else if frame.cloud.rgb.is_empty() {
            Tensor::zeros(&[batch.num_points(), 3])
        } else {
            return Err(Error::dim(format!(
                "frame {}: {} colours for {} points",
                frame.id,
                frame.cloud.rgb.len(),
                frame.cloud.points.len()
            )));
        };
        let feats = self.encoder.forward(&batch, &rgb, training)?;
        scatter_to_pseudo_image(&feats, &batch.coords, pc)
    }

    pub fn forward(&self, frame: &Frame, training: bool, seed: u64) -> Result<HeadOutput> {
        let img = self.pseudo_image(frame, training, seed)?;
        self.head.forward(&self.backbone.forward(&img, training)?)
    }
}

impl Module for Detector {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        self.encoder.visit(&join(prefix, "encoder"), v);
        self.backbone.visit(&join(prefix, "backbone"), v);
        self.head.visit(&join(prefix, "head"), v);
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        self.encoder.visit_mut(&join(prefix, "encoder"), v);
        self.backbone.visit_mut(&join(prefix, "backbone"), v);
        self.head.visit_mut(&join(prefix, "head"), v);
    }
}

/// Per-anchor supervision for one frame.
#[derive(Debug, Clone)]
pub struct Targets {
    pub labels: Vec<AnchorLabel>,
    pub boxes: Vec<Option<RegressionTarget>>,
    pub dirs: Vec<Option<bool>>,
    pub n_pos: usize,
}

/// Matches anchors to the frame's boxes. Negative anchors overlapping an
/// ignore box by at least the negative threshold become ignored.
pub fn build_targets(grid: &AnchorGrid, cfg: &AnchorConfig, frame: &Frame) -> Targets {
    let mut labels = assign_targets(grid, &frame.gt_boxes, cfg);
    if !frame.ignore_boxes.is_empty() {
        for (l, a) in labels.iter_mut().zip(&grid.anchors) {
            if *l == AnchorLabel::Negative
                && frame.ignore_boxes.iter().any(|b| bev_iou(a, b).unwrap_or(0.0) >= cfg.neg_iou)
            {
                *l = AnchorLabel::Ignore;
            }
        }
    }
    let mut boxes = vec![None; labels.len()];
    let mut dirs = vec![None; labels.len()];
    let mut n_pos = 0;
    for (i, l) in labels.iter().enumerate() {
        if let AnchorLabel::Positive(g) = *l {
            let (gt, a) = (&frame.gt_boxes[g], &grid.anchors[i]);
            boxes[i] = Some(encode_targets(gt, a));
            dirs[i] = Some(direction_target(gt.yaw, a.yaw));
            n_pos += 1;
        }
    }
    Targets { labels, boxes, dirs, n_pos }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
    pub n_pos: usize,
}

/// Differentiable loss of one frame plus its scalar breakdown.
pub fn frame_loss(det: &Detector, frame: &Frame, training: bool, seed: u64) -> Result<(Tensor, LossReport)> {
    let out = det.forward(frame, training, seed)?;
    let t = build_targets(&det.anchors, &det.cfg.anchors, frame);
    let loc = smooth_l1_loc_loss(&out.box_deltas, &t.boxes)?;
    let cls = focal_loss(&out.cls_logits, &t.labels, det.cfg.focal)?;
    let dir = dir_loss(&out.dir_logits, &t.dirs)?;
    let total = total_loss(&loc, &cls, &dir, t.n_pos, det.cfg.loss)?;
    let report = LossReport {
        total: total.item()?,
        loc: loc.item()?,
        cls: cls.item()?,
        dir: dir.item()?,
        n_pos: t.n_pos,
    };
    Ok((total, report))
}

/// One optimiser update on the mean loss of `frames`. A non-finite loss
/// aborts before any parameter changes.
pub fn train_step(det: &mut Detector, opt: &mut Adam, frames: &[Frame], seed: u64) -> Result<LossReport> {
    if frames.is_empty() {
        return Err(Error::EmptySet("train_step without frames".into()));
    }
    zero_grads(det);
    let k = frames.len() as f64;
    let mut sum = LossReport { total: 0.0, loc: 0.0, cls: 0.0, dir: 0.0, n_pos: 0 };
    let mut losses = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let (l, r) = frame_loss(det, f, true, seed.wrapping_add(i as u64))?;
        if !r.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss on frame {:?} at optimiser step {}: loc={} cls={} dir={} n_pos={}",
                f.id,
                opt.step + 1,
                r.loc,
                r.cls,
                r.dir,
                r.n_pos
            )));
        }
        sum.total += r.total / k;
        sum.loc += r.loc / k;
        sum.cls += r.cls / k;
        sum.dir += r.dir / k;
        sum.n_pos += r.n_pos;
        losses.push(crate::diffcore::scale(&l, 1.0 / k));
    }
    let total = crate::diffcore::add_all(&losses.iter().collect::<Vec<_>>())?;
    total.backward()?;
    opt.step(det)?;
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// Raw per-anchor scores and decoded boxes (no thresholding).
pub fn decode_all(det: &Detector, out: &HeadOutput) -> Vec<Detection> {
    let cls = out.cls_logits.data();
    let reg = out.box_deltas.data();
    let dir = out.dir_logits.data();
    det.anchors
        .anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut t = [0.0; CODE_SIZE];
            t.copy_from_slice(&reg[i * CODE_SIZE..(i + 1) * CODE_SIZE]);
            Detection {
                bbox: decode_targets(&RegressionTarget(t), a, dir[2 * i + 1] >= dir[2 * i]),
                score: crate::diffcore::sigmoid_scalar(cls[i]),
            }
        })
        .collect()
}

/// Sigmoid scores, score threshold, decode with the direction bit, rotated
/// NMS. Detections come back by descending score.
pub fn infer(det: &Detector, frame: &Frame, icfg: &InferConfig) -> Result<Vec<Detection>> {
    if frame.cloud.points.is_empty() {
        return Ok(Vec::new());
    }
    let out = det.forward(frame, false, 0)?;
    let mut cands: Vec<Detection> = decode_all(det, &out)
        .into_iter()
        .filter(|d| d.score > icfg.score_threshold && d.bbox.validate().is_ok())
        .collect();
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    cands.truncate(icfg.pre_nms_top_k);
    let boxes: Vec<Box3D> = cands.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = cands.iter().map(|d| d.score).collect();
    let keep = rotated_nms(&boxes, &scores, icfg.nms_threshold)?;
    Ok(keep.into_iter().take(icfg.max_detections).map(|i| cands[i]).collect())
}
