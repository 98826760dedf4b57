//! 2D backbone, anchor head, composite detection loss, optimiser, and the
//! train/infer entry points tying every stage together.

mod backbone;
mod detector;
mod head;
mod loss;
mod optim;

pub use backbone::{Backbone, BackboneConfig, BlockConfig, UpBlock};
pub use detector::{
    build_targets, decode_all, frame_loss, infer, train_step, Detection, Detector, InferConfig, LossReport,
    ModelConfig, Targets,
};
pub use head::{Head, HeadOutput, CLS_PRIOR};
pub use loss::{dir_loss, focal_loss, smooth_l1_loc_loss, total_loss, FocalParams, LossWeights};
pub use optim::{Adam, AdamConfig};

/// Shorthand for [`Backbone::forward`].
pub fn backbone_forward(backbone: &Backbone, pseudo: &crate::diffcore::Tensor, training: bool) -> crate::Result<crate::diffcore::Tensor> {
    backbone.forward(pseudo, training)
}

/// Shorthand for [`Head::forward`].
pub fn head_forward(head: &Head, features: &crate::diffcore::Tensor) -> crate::Result<HeadOutput> {
    head.forward(features)
}
