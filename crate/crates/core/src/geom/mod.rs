//! Oriented boxes, rotated IoU, residual coding, NMS and anchors.

pub mod anchors;
mod box3d;
pub mod coding;
pub mod iou;
pub mod nms;

pub use anchors::{assign_targets, build_anchor_grid, AnchorConfig, AnchorGrid, AnchorLabel};
pub use box3d::{normalize_angle, Box3D};
pub use coding::{decode_targets, direction_target, encode_targets, RegressionTarget, CODE_SIZE};
pub use iou::{bev_iou, iou3d};
pub use nms::rotated_nms;
