//! Multi-modal attention fusion: a point-wise branch that gates lidar and
//! image features before pillarisation, and a pillar-wise branch that gates
//! three separately encoded pillar streams after it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    add_all, concat, join, mul, relu, segment_max, sigmoid, LinearBnRelu, LinearLayer, Module, Tensor,
    Visitor, VisitorMut,
};
use crate::error::{Error, Result};
use crate::pillars::{PillarBatch, LIDAR_CHANNELS};

pub const RGB_CHANNELS: usize = 3;
pub const IMAGE_FEATURE_DIM: usize = 16;
pub const PILLAR_FEATURE_DIM: usize = 64;
const MLP_PD_HIDDEN: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Lidar only.
    #[default]
    Baseline,
    Paf,
    /// Point-wise concatenation without attention.
    PointFusion,
    Daf,
    /// Pillar-wise streams summed without attention.
    DenseFusion,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Baseline,
        FusionMode::Paf,
        FusionMode::PointFusion,
        FusionMode::Daf,
        FusionMode::DenseFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Baseline => "baseline",
            FusionMode::Paf => "paf",
            FusionMode::PointFusion => "point_fusion",
            FusionMode::Daf => "daf",
            FusionMode::DenseFusion => "dense_fusion",
        }
    }

    pub fn uses_image(self) -> bool {
        self != FusionMode::Baseline
    }

    /// Channels of the pillar features fed to the pseudo-image.
    pub fn out_channels(self) -> usize {
        match self {
            FusionMode::Daf | FusionMode::DenseFusion => 4 * PILLAR_FEATURE_DIM,
            _ => PILLAR_FEATURE_DIM,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

/// Maps per-point RGB to image features through stacked
/// Linear → BatchNorm → ReLU blocks.
#[derive(Debug, Clone)]
pub struct MlpPD {
    pub blocks: Vec<LinearBnRelu>,
}

impl MlpPD {
    /// Dims `(3, 96, 16)`.
    pub fn new(rng: &mut impl Rng) -> Self {
        Self::with_dims(rng, &[RGB_CHANNELS, MLP_PD_HIDDEN, IMAGE_FEATURE_DIM])
    }

    pub fn with_dims(rng: &mut impl Rng, dims: &[usize]) -> Self {
        Self {
            blocks: dims.windows(2).map(|w| LinearBnRelu::new(rng, w[0], w[1])).collect(),
        }
    }

    pub fn forward(&self, rgb: &Tensor, training: bool) -> Result<Tensor> {
        let mut h = rgb.clone();
        for b in &self.blocks {
            h = b.forward(&h, training)?;
        }
        Ok(h)
    }
}

impl Module for MlpPD {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), v);
        }
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), v);
        }
    }
}

/// `[M, 3]` RGB → `[M, 16]` image features.
pub fn map_image_features(rgb: &Tensor, mlp_pd: &MlpPD, training: bool) -> Result<Tensor> {
    if rgb.shape().len() != 2 || rgb.shape()[1] != RGB_CHANNELS {
        return Err(Error::dim(format!("rgb must be [M, 3], got {:?}", rgb.shape())));
    }
    mlp_pd.forward(rgb, training)
}

/// Linear → ReLU → Linear → sigmoid, producing channel gates.
#[derive(Debug, Clone)]
pub struct AttentionMlp {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl AttentionMlp {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: LinearLayer::new(rng, input, hidden, true),
            fc2: LinearLayer::new(rng, hidden, output, true),
        }
    }

    /// All weights and biases zero: every gate is exactly 0.5.
    pub fn zeroed(input: usize, hidden: usize, output: usize) -> Self {
        let z = |o: usize, i: usize| {
            LinearLayer::from_parts(
                Tensor::param(&[o, i], vec![0.0; o * i]).expect("shape"),
                Some(Tensor::param(&[o], vec![0.0; o]).expect("shape")),
            )
            .expect("consistent parts")
        };
        Self {
            fc1: z(hidden, input),
            fc2: z(output, hidden),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = relu(&self.fc1.forward(x)?);
        Ok(sigmoid(&self.fc2.forward(&h)?))
    }
}

impl Module for AttentionMlp {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        self.fc1.visit(&join(prefix, "fc1"), v);
        self.fc2.visit(&join(prefix, "fc2"), v);
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        self.fc1.visit_mut(&join(prefix, "fc1"), v);
        self.fc2.visit_mut(&join(prefix, "fc2"), v);
    }
}

/// Gate `x` by an attention MLP evaluated on `context`.
fn gated(x: &Tensor, context: &Tensor, att: &AttentionMlp) -> Result<Tensor> {
    let g = att.forward(context)?;
    if g.shape() != x.shape() {
        return Err(Error::dim(format!("gate {:?} for features {:?}", g.shape(), x.shape())));
    }
    mul(x, &g)
}

fn check_rows(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::dim(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PafAttention {
    pub mlp_p: AttentionMlp,
    pub mlp_i: AttentionMlp,
}

/// Point-wise fusion. Without `attention` this is plain concatenation of
/// lidar and image point features.
#[derive(Debug, Clone)]
pub struct PafModule {
    pub mlp_pd: MlpPD,
    pub attention: Option<PafAttention>,
    pub pfn: LinearBnRelu,
}

impl PafModule {
    pub fn new(rng: &mut impl Rng, with_attention: bool) -> Self {
        let e = LIDAR_CHANNELS + IMAGE_FEATURE_DIM;
        let mlp_pd = MlpPD::new(rng);
        let attention = with_attention.then(|| PafAttention {
            mlp_p: AttentionMlp::new(rng, e, e, LIDAR_CHANNELS),
            mlp_i: AttentionMlp::new(rng, e, e, IMAGE_FEATURE_DIM),
        });
        let pfn_in = if with_attention { 2 * e } else { e };
        Self {
            mlp_pd,
            attention,
            pfn: LinearBnRelu::new(rng, pfn_in, PILLAR_FEATURE_DIM),
        }
    }

    /// Per-point fusion features for the module's configuration.
    pub fn point_features(&self, fp: &Tensor, fi: &Tensor) -> Result<Tensor> {
        match &self.attention {
            Some(att) => paf_fuse(fp, fi, att),
            None => {
                check_rows(fp, fi, "point fusion")?;
                concat(&[fp, fi], 1)
            }
        }
    }
}

impl Module for PafModule {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        self.mlp_pd.visit(&join(prefix, "mlp_pd"), v);
        if let Some(a) = &self.attention {
            a.mlp_p.visit(&join(prefix, "mlp_p"), v);
            a.mlp_i.visit(&join(prefix, "mlp_i"), v);
        }
        self.pfn.visit(&join(prefix, "pfn"), v);
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        self.mlp_pd.visit_mut(&join(prefix, "mlp_pd"), v);
        if let Some(a) = &mut self.attention {
            a.mlp_p.visit_mut(&join(prefix, "mlp_p"), v);
            a.mlp_i.visit_mut(&join(prefix, "mlp_i"), v);
        }
        self.pfn.visit_mut(&join(prefix, "pfn"), v);
    }
}

/// `concat(F_P, F_I, F_P ⊙ σ(MLP_P(F_E)), F_I ⊙ σ(MLP_I(F_E)))` with
/// `F_E = concat(F_P, F_I)`.
pub fn paf_fuse(fp: &Tensor, fi: &Tensor, att: &PafAttention) -> Result<Tensor> {
    check_rows(fp, fi, "paf_fuse rows")?;
    let fe = concat(&[fp, fi], 1)?;
    let ap = gated(fp, &fe, &att.mlp_p)?;
    let ai = gated(fi, &fe, &att.mlp_i)?;
    concat(&[fp, fi, &ap, &ai], 1)
}

/// Shared PFN over points, then per-pillar channel max.
pub fn paf_encode_pillars(
    points: &Tensor,
    groups: &[Vec<usize>],
    pfn: &LinearBnRelu,
    training: bool,
) -> Result<Tensor> {
    if groups.is_empty() {
        return Ok(Tensor::zeros(&[0, pfn.dims().1]));
    }
    segment_max(&pfn.forward(points, training)?, groups)
}

#[derive(Debug, Clone)]
pub struct DafAttention {
    pub mlp_p: AttentionMlp,
    pub mlp_pi: AttentionMlp,
    pub mlp_i: AttentionMlp,
}

/// Pillar-wise fusion over three streams. Without `attention` the streams
/// are summed ungated.
#[derive(Debug, Clone)]
pub struct DafModule {
    pub mlp_pd: MlpPD,
    pub pfn_p: LinearBnRelu,
    pub pfn_pi: LinearBnRelu,
    pub pfn_i: LinearBnRelu,
    pub attention: Option<DafAttention>,
}

impl DafModule {
    pub fn new(rng: &mut impl Rng, with_attention: bool) -> Self {
        let d = PILLAR_FEATURE_DIM;
        let mlp_pd = MlpPD::new(rng);
        let pfn_p = LinearBnRelu::new(rng, LIDAR_CHANNELS, d);
        let pfn_pi = LinearBnRelu::new(rng, LIDAR_CHANNELS + IMAGE_FEATURE_DIM, d);
        let pfn_i = LinearBnRelu::new(rng, RGB_CHANNELS, d);
        let attention = with_attention.then(|| DafAttention {
            mlp_p: AttentionMlp::new(rng, 3 * d, 3 * d, d),
            mlp_pi: AttentionMlp::new(rng, 3 * d, 3 * d, d),
            mlp_i: AttentionMlp::new(rng, 3 * d, 3 * d, d),
        });
        Self {
            mlp_pd,
            pfn_p,
            pfn_pi,
            pfn_i,
            attention,
        }
    }
}

impl Module for DafModule {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        self.mlp_pd.visit(&join(prefix, "mlp_pd"), v);
        self.pfn_p.visit(&join(prefix, "pfn_p"), v);
        self.pfn_pi.visit(&join(prefix, "pfn_pi"), v);
        self.pfn_i.visit(&join(prefix, "pfn_i"), v);
        if let Some(a) = &self.attention {
            a.mlp_p.visit(&join(prefix, "att_p"), v);
            a.mlp_pi.visit(&join(prefix, "att_pi"), v);
            a.mlp_i.visit(&join(prefix, "att_i"), v);
        }
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        self.mlp_pd.visit_mut(&join(prefix, "mlp_pd"), v);
        self.pfn_p.visit_mut(&join(prefix, "pfn_p"), v);
        self.pfn_pi.visit_mut(&join(prefix, "pfn_pi"), v);
        self.pfn_i.visit_mut(&join(prefix, "pfn_i"), v);
        if let Some(a) = &mut self.attention {
            a.mlp_p.visit_mut(&join(prefix, "att_p"), v);
            a.mlp_pi.visit_mut(&join(prefix, "att_pi"), v);
            a.mlp_i.visit_mut(&join(prefix, "att_i"), v);
        }
    }
}

/// One pillar-level feature stream with the partition it was built on.
#[derive(Debug, Clone)]
pub struct PillarStream {
    pub coords: Vec<[usize; 2]>,
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct DafStreams {
    pub p: PillarStream,
    pub pi: PillarStream,
    pub i: PillarStream,
}

/// Builds the lidar, lidar+image and image pillar streams over one shared
/// partition. `rgb` is `[M, 3]`, row-aligned with `batch.points`.
pub fn daf_build_streams(batch: &PillarBatch, rgb: &Tensor, m: &DafModule, training: bool) -> Result<DafStreams> {
    check_rows(&batch.points, rgb, "daf streams: points vs rgb")?;
    let stream = |features: Tensor| PillarStream {
        coords: batch.coords.clone(),
        features,
    };
    if batch.is_empty() {
        let z = || stream(Tensor::zeros(&[0, PILLAR_FEATURE_DIM]));
        return Ok(DafStreams { p: z(), pi: z(), i: z() });
    }
    let fi = map_image_features(rgb, &m.mlp_pd, training)?;
    let fpi = concat(&[&batch.points, &fi], 1)?;
    Ok(DafStreams {
        p: stream(paf_encode_pillars(&batch.points, &batch.groups, &m.pfn_p, training)?),
        pi: stream(paf_encode_pillars(&fpi, &batch.groups, &m.pfn_pi, training)?),
        i: stream(paf_encode_pillars(rgb, &batch.groups, &m.pfn_i, training)?),
    })
}

/// `concat(F_P, F_PI, F_I, F_A)` where `F_A` is the (gated) stream sum.
pub fn daf_fuse(s: &DafStreams, attention: Option<&DafAttention>) -> Result<Tensor> {
    if s.p.coords != s.pi.coords || s.p.coords != s.i.coords {
        return Err(Error::contract("daf_fuse: streams built on different pillar partitions"));
    }
    let (p, pi, i) = (&s.p.features, &s.pi.features, &s.i.features);
    check_rows(p, pi, "daf_fuse")?;
    check_rows(p, i, "daf_fuse")?;
    let fa = match attention {
        Some(att) => {
            let fc = concat(&[p, pi, i], 1)?;
            let ap = gated(p, &fc, &att.mlp_p)?;
            let api = gated(pi, &fc, &att.mlp_pi)?;
            let ai = gated(i, &fc, &att.mlp_i)?;
            add_all(&[&ap, &api, &ai])?
        }
        None => add_all(&[p, pi, i])?,
    };
    concat(&[p, pi, i, &fa], 1)
}

/// Pillar feature encoder for every fusion mode.
#[derive(Debug, Clone)]
pub enum PillarEncoder {
    Lidar(LinearBnRelu),
    Paf(PafModule),
    Daf(DafModule),
}

impl PillarEncoder {
    pub fn new(mode: FusionMode, rng: &mut impl Rng) -> Self {
        match mode {
            FusionMode::Baseline => PillarEncoder::Lidar(LinearBnRelu::new(rng, LIDAR_CHANNELS, PILLAR_FEATURE_DIM)),
            FusionMode::Paf => PillarEncoder::Paf(PafModule::new(rng, true)),
            FusionMode::PointFusion => PillarEncoder::Paf(PafModule::new(rng, false)),
            FusionMode::Daf => PillarEncoder::Daf(DafModule::new(rng, true)),
            FusionMode::DenseFusion => PillarEncoder::Daf(DafModule::new(rng, false)),
        }
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            PillarEncoder::Lidar(_) => FusionMode::Baseline,
            PillarEncoder::Paf(m) if m.attention.is_some() => FusionMode::Paf,
            PillarEncoder::Paf(_) => FusionMode::PointFusion,
            PillarEncoder::Daf(m) if m.attention.is_some() => FusionMode::Daf,
            PillarEncoder::Daf(_) => FusionMode::DenseFusion,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.mode().out_channels()
    }

    /// `[P, C]` pillar features. `rgb` is `[M, 3]`, row-aligned with
    /// `batch.points`; the lidar-only encoder ignores it.
    pub fn forward(&self, batch: &PillarBatch, rgb: &Tensor, training: bool) -> Result<Tensor> {
        if batch.is_empty() {
            return Ok(Tensor::zeros(&[0, self.out_channels()]));
        }
        match self {
            PillarEncoder::Lidar(pfn) => paf_encode_pillars(&batch.points, &batch.groups, pfn, training),
            PillarEncoder::Paf(m) => {
                check_rows(&batch.points, rgb, "paf: points vs rgb")?;
                let fi = map_image_features(rgb, &m.mlp_pd, training)?;
                let fused = m.point_features(&batch.points, &fi)?;
                paf_encode_pillars(&fused, &batch.groups, &m.pfn, training)
            }
            PillarEncoder::Daf(m) => daf_fuse(&daf_build_streams(batch, rgb, m, training)?, m.attention.as_ref()),
        }
    }
}

impl Module for PillarEncoder {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        match self {
            PillarEncoder::Lidar(p) => p.visit(&join(prefix, "pfn"), v),
            PillarEncoder::Paf(m) => m.visit(prefix, v),
            PillarEncoder::Daf(m) => m.visit(prefix, v),
        }
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        match self {
            PillarEncoder::Lidar(p) => p.visit_mut(&join(prefix, "pfn"), v),
            PillarEncoder::Paf(m) => m.visit_mut(prefix, v),
            PillarEncoder::Daf(m) => m.visit_mut(prefix, v),
        }
    }
}

/// `[M, 3]` colours for the batch's kept points, looked up through the
/// decoration rows they came from.
pub fn batch_rgb(batch: &PillarBatch, decoration_source: &[usize], rgb: &[[f64; 3]]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch.num_points() * RGB_CHANNELS);
    for &row in &batch.rows {
        let src = *decoration_source
            .get(row)
            .ok_or_else(|| Error::dim(format!("decoration row {row} out of range")))?;
        let c = rgb
            .get(src)
            .ok_or_else(|| Error::dim(format!("point {src} has no colour")))?;
        data.extend_from_slice(c);
    }
    Tensor::new(&[batch.num_points(), RGB_CHANNELS], data)
}
