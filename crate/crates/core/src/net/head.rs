use rand::Rng;

use crate::diffcore::{join, reshape, transpose, Conv2dLayer, Module, Tensor, Visitor, VisitorMut};
use crate::error::{Error, Result};
use crate::geom::CODE_SIZE;

/// Prior foreground probability the classification bias starts at, so an
/// untrained detector emits no confident boxes.
pub const CLS_PRIOR: f64 = 0.01;

/// Per-anchor outputs, rows ordered like the anchor grid.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `[A, 1]`
    pub cls_logits: Tensor,
    /// `[A, 7]`
    pub box_deltas: Tensor,
    /// `[A, 2]`; column 1 is the "same half-turn as the anchor" class.
    pub dir_logits: Tensor,
}

impl HeadOutput {
    pub fn num_anchors(&self) -> usize {
        self.cls_logits.shape()[0]
    }
}

/// 1×1 convolutions emitting classification, box and direction channels
/// for `per_cell` anchors at every output cell.
#[derive(Debug, Clone)]
pub struct Head {
    pub cls: Conv2dLayer,
    pub reg: Conv2dLayer,
    pub dir: Conv2dLayer,
    pub per_cell: usize,
}

impl Head {
    pub fn new(rng: &mut impl Rng, in_channels: usize, per_cell: usize) -> Self {
        let cls = Conv2dLayer::new(rng, in_channels, per_cell, 1, 1, 0, true);
        let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        let cls = Conv2dLayer {
            bias: cls.bias.map(|b| b.with_data(vec![prior; per_cell]).expect("shape")),
            ..cls
        };
        Self {
            cls,
            reg: Conv2dLayer::new(rng, in_channels, per_cell * CODE_SIZE, 1, 1, 0, true),
            dir: Conv2dLayer::new(rng, in_channels, per_cell * 2, 1, 1, 0, true),
            per_cell,
        }
    }

    pub fn forward(&self, features: &Tensor) -> Result<HeadOutput> {
        if features.shape().len() != 3 {
            return Err(Error::dim(format!("head expects [C, H, W], got {:?}", features.shape())));
        }
        let hw = features.shape()[1] * features.shape()[2];
        let r = self.per_cell;
        // [R·D, H, W] → [R·D, HW] → [HW, R·D] → [HW·R, D]
        let per_anchor = |conv: &Conv2dLayer, d: usize| -> Result<Tensor> {
            let y = conv.forward(features)?;
            let y = transpose(&reshape(&y, &[r * d, hw])?)?;
            reshape(&y, &[hw * r, d])
        };
        Ok(HeadOutput {
            cls_logits: per_anchor(&self.cls, 1)?,
            box_deltas: per_anchor(&self.reg, CODE_SIZE)?,
            dir_logits: per_anchor(&self.dir, 2)?,
        })
    }
}

impl Module for Head {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        self.cls.visit(&join(prefix, "cls"), v);
        self.reg.visit(&join(prefix, "reg"), v);
        self.dir.visit(&join(prefix, "dir"), v);
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        self.cls.visit_mut(&join(prefix, "cls"), v);
        self.reg.visit_mut(&join(prefix, "reg"), v);
        self.dir.visit_mut(&join(prefix, "dir"), v);
    }
}
