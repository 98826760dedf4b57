use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{concat, relu, BatchNorm, ConvBnRelu, Module, Tensor, UpConvLayer, Visitor, VisitorMut, join};
use crate::error::{Error, Result};

/// One downsampling stage. `layers` counts every 3×3 convolution in the
/// stage, the first of which carries the stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub layers: usize,
    pub stride: usize,
    pub channels: usize,
    pub upsample_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub blocks: Vec<BlockConfig>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Two stages (2 convs each, strides 1/2, 32/64 channels), each
    /// upsampled back to the input resolution with 32 channels.
    pub fn desk() -> Self {
        Self {
            blocks: vec![
                BlockConfig { layers: 2, stride: 1, channels: 32, upsample_channels: 32 },
                BlockConfig { layers: 2, stride: 2, channels: 64, upsample_channels: 32 },
            ],
        }
    }

    /// Three stages (4/6/6 convs, stride 2 each, 64/128/256 channels,
    /// 128 upsampled channels each): output at half the input resolution.
    pub fn full() -> Self {
        Self {
            blocks: vec![
                BlockConfig { layers: 4, stride: 2, channels: 64, upsample_channels: 128 },
                BlockConfig { layers: 6, stride: 2, channels: 128, upsample_channels: 128 },
                BlockConfig { layers: 6, stride: 2, channels: 256, upsample_channels: 128 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.layers == 0 || b.stride == 0 || b.channels == 0 || b.upsample_channels == 0 {
                return Err(Error::Config(format!("backbone block {i} has a zero field: {b:?}")));
            }
        }
        Ok(())
    }

    /// Cumulative stride after each block.
    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(1, |s, b| {
                *s *= b.stride;
                Some(*s)
            })
            .collect()
    }

    /// Downsampling factor between pseudo-image and output feature map.
    pub fn output_stride(&self) -> usize {
        self.cumulative_strides()[0]
    }

    /// Input sizes must divide by this.
    pub fn total_stride(&self) -> usize {
        *self.cumulative_strides().last().expect("validated non-empty")
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.iter().map(|b| b.upsample_channels).sum()
    }

    /// Output `(h, w)` for a pseudo-image of `(h, w)`, or an error if the
    /// grid does not divide evenly.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let t = self.total_stride();
        if h % t != 0 || w % t != 0 {
            return Err(Error::Config(format!("grid {h}x{w} is not divisible by backbone stride {t}")));
        }
        let s = self.output_stride();
        Ok((h / s, w / s))
    }
}

#[derive(Debug, Clone)]
pub struct UpBlock {
    pub up: UpConvLayer,
    pub bn: BatchNorm,
}

impl Module for UpBlock {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        self.up.visit(&join(prefix, "up"), v);
        self.bn.visit(&join(prefix, "bn"), v);
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        self.up.visit_mut(&join(prefix, "up"), v);
        self.bn.visit_mut(&join(prefix, "bn"), v);
    }
}

/// Downsampling conv stages whose outputs are each upsampled to the first
/// stage's resolution and concatenated along channels.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub in_channels: usize,
    pub stages: Vec<Vec<ConvBnRelu>>,
    pub ups: Vec<UpBlock>,
}

impl Backbone {
    pub fn new(rng: &mut impl Rng, in_channels: usize, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let cum = cfg.cumulative_strides();
        let mut c_in = in_channels;
        let mut stages = Vec::new();
        let mut ups = Vec::new();
        for (i, b) in cfg.blocks.iter().enumerate() {
            let mut layers = vec![ConvBnRelu::new(rng, c_in, b.channels, 3, b.stride, 1)];
            for _ in 1..b.layers {
                layers.push(ConvBnRelu::new(rng, b.channels, b.channels, 3, 1, 1));
            }
            stages.push(layers);
            ups.push(UpBlock {
                up: UpConvLayer::new(rng, b.channels, b.upsample_channels, cum[i] / cum[0], false),
                bn: BatchNorm::new(b.upsample_channels),
            });
            c_in = b.channels;
        }
        Ok(Self { in_channels, stages, ups })
    }

    pub fn out_channels(&self) -> usize {
        self.ups.iter().map(|u| u.up.out_channels()).sum()
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        if x.shape().len() != 3 || x.shape()[0] != self.in_channels {
            return Err(Error::dim(format!(
                "backbone expects [{}, H, W], got {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        let mut h = x.clone();
        let mut outs = Vec::with_capacity(self.stages.len());
        for (stage, up) in self.stages.iter().zip(&self.ups) {
            for layer in stage {
                h = layer.forward(&h, training)?;
            }
            outs.push(relu(&up.bn.forward(&up.up.forward(&h)?, training)?));
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        concat(&refs, 0)
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        for (i, (stage, up)) in self.stages.iter().zip(&self.ups).enumerate() {
            for (j, l) in stage.iter().enumerate() {
                l.visit(&join(prefix, &format!("block{i}.conv{j}")), v);
            }
            up.visit(&join(prefix, &format!("block{i}.deblock")), v);
        }
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        for (i, (stage, up)) in self.stages.iter_mut().zip(&mut self.ups).enumerate() {
            for (j, l) in stage.iter_mut().enumerate() {
                l.visit_mut(&join(prefix, &format!("block{i}.conv{j}")), v);
            }
            up.visit_mut(&join(prefix, &format!("block{i}.deblock")), v);
        }
    }
}
