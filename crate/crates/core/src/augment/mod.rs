//! Ground-truth sampling and global point-cloud augmentation. Colours are
//! frozen per-point attributes by the time these run, so every transform
//! carries them along untouched.

use std::f64::consts::FRAC_PI_4;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::geom::{bev_iou, normalize_angle, Box3D};
use crate::kittio::{DecoratedPointCloud, Point};

/// Points of one ground-truth object with their colours.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSample {
    pub source: String,
    pub bbox: Box3D,
    pub cloud: DecoratedPointCloud,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtSampleDatabase {
    pub samples: Vec<GtSample>,
}

impl GtSampleDatabase {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn select(cloud: &DecoratedPointCloud, keep: impl Fn(&Point) -> bool) -> DecoratedPointCloud {
    let mut out = DecoratedPointCloud::default();
    for i in 0..cloud.len() {
        if keep(&cloud.points[i]) {
            out.points.push(cloud.points[i]);
            out.rgb.push(cloud.rgb[i]);
            out.in_image.push(cloud.in_image[i]);
        }
    }
    out
}

fn append(dst: &mut DecoratedPointCloud, src: &DecoratedPointCloud) {
    dst.points.extend_from_slice(&src.points);
    dst.rgb.extend_from_slice(&src.rgb);
    dst.in_image.extend_from_slice(&src.in_image);
}

/// One entry per vehicle box, holding the points inside it.
pub fn build_gt_database(frames: &[Frame]) -> GtSampleDatabase {
    let mut samples = Vec::new();
    for f in frames {
        for b in &f.gt_boxes {
            samples.push(GtSample {
                source: f.id.clone(),
                bbox: *b,
                cloud: select(&f.cloud, |p| b.contains(p.x, p.y, p.z)),
            });
        }
    }
    GtSampleDatabase { samples }
}

const DB_MAGIC: &[u8; 8] = b"MAFFGTDB";
const DB_VERSION: u32 = 1;

/// Little-endian layout: magic, `u32` version, `u32` count, then per record
/// `u32` id length + UTF-8 id, 7 × `f64` box, `u32` point count and per
/// point 7 × `f64` (x, y, z, r, red, green, blue) + `u8` in-image flag.
pub fn encode_gt_database(db: &GtSampleDatabase) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DB_MAGIC);
    out.extend_from_slice(&DB_VERSION.to_le_bytes());
    out.extend_from_slice(&(db.samples.len() as u32).to_le_bytes());
    for s in &db.samples {
        out.extend_from_slice(&(s.source.len() as u32).to_le_bytes());
        out.extend_from_slice(s.source.as_bytes());
        for v in s.bbox.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(s.cloud.len() as u32).to_le_bytes());
        for i in 0..s.cloud.len() {
            let p = s.cloud.points[i];
            for v in [p.x, p.y, p.z, p.r].into_iter().chain(s.cloud.rgb[i]) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(s.cloud.in_image[i] as u8);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, None, format!("truncated at byte {}", self.pos)));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_gt_database(bytes: &[u8], path: &Path) -> Result<GtSampleDatabase> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8)? != DB_MAGIC {
        return Err(Error::format(path, None, "not a GT database file"));
    }
    let version = c.u32()?;
    if version != DB_VERSION {
        return Err(Error::format(path, None, format!("unsupported GT database version {version}")));
    }
    let count = c.u32()? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u32()? as usize;
        let source = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::format(path, None, "frame id is not UTF-8"))?
            .to_string();
        let mut a = [0.0; 7];
        for v in &mut a {
            *v = c.f64()?;
        }
        let bbox = Box3D::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
            .map_err(|e| Error::format(path, None, e.to_string()))?;
        let n = c.u32()? as usize;
        let mut cloud = DecoratedPointCloud::default();
        for _ in 0..n {
            let p = Point::new(c.f64()?, c.f64()?, c.f64()?, c.f64()?);
            let rgb = [c.f64()?, c.f64()?, c.f64()?];
            let flag = c.take(1)?[0];
            if flag > 1 {
                return Err(Error::format(path, None, format!("bad in-image flag {flag}")));
            }
            cloud.points.push(p);
            cloud.rgb.push(rgb);
            cloud.in_image.push(flag == 1);
        }
        samples.push(GtSample { source, bbox, cloud });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, None, "trailing bytes after last record"));
    }
    Ok(GtSampleDatabase { samples })
}

pub fn write_gt_database(db: &GtSampleDatabase, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_gt_database(db)).map_err(|e| Error::io(path, e))
}

pub fn load_gt_database(path: &Path) -> Result<GtSampleDatabase> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_gt_database(&bytes, path)
}

fn collides(b: &Box3D, others: &[Box3D]) -> bool {
    others.iter().any(|o| bev_iou(b, o).map_or(true, |v| v > 0.0))
}

/// Pastes up to `max_added` database objects whose footprint overlaps no
/// box already in the frame (or pasted before them). Frame points inside a
/// pasted box are removed first.
pub fn sample_and_paste(frame: &Frame, db: &GtSampleDatabase, max_added: usize, seed: u64) -> Result<Frame> {
    if max_added == 0 {
        return Ok(frame.clone());
    }
    if db.is_empty() {
        return Err(Error::EmptySet("sampling from an empty GT database".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut occupied: Vec<Box3D> = frame.gt_boxes.iter().chain(&frame.ignore_boxes).copied().collect();
    let mut pasted = Vec::new();
    for i in sample(&mut rng, db.len(), db.len()).into_iter() {
        if pasted.len() == max_added {
            break;
        }
        let s = &db.samples[i];
        if !collides(&s.bbox, &occupied) {
            occupied.push(s.bbox);
            pasted.push(s);
        }
    }
    let mut out = frame.clone();
    if pasted.is_empty() {
        return Ok(out);
    }
    out.cloud = select(&frame.cloud, |p| !pasted.iter().any(|s| s.bbox.contains(p.x, p.y, p.z)));
    for s in pasted {
        append(&mut out.cloud, &s.cloud);
        out.gt_boxes.push(s.bbox);
    }
    Ok(out)
}

/// One draw of the global transform: optional mirror across the x axis,
/// then rotation about z, then uniform scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTransform {
    pub flip_y: bool,
    pub rotation: f64,
    pub scale: f64,
}

impl GlobalTransform {
    pub const IDENTITY: Self = Self { flip_y: false, rotation: 0.0, scale: 1.0 };

    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let uniform = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let flip_y = rng.gen_bool(cfg.flip_probability);
        let rotation = uniform(rng, cfg.rotation_range);
        let scale = uniform(rng, cfg.scale_range);
        Self { flip_y, rotation, scale }
    }

    pub fn apply_point(&self, mut x: f64, mut y: f64, mut z: f64) -> (f64, f64, f64) {
        if self.flip_y {
            y = -y;
        }
        if self.rotation != 0.0 {
            let (s, c) = self.rotation.sin_cos();
            (x, y) = (c * x - s * y, s * x + c * y);
        }
        if self.scale != 1.0 {
            (x, y, z) = (x * self.scale, y * self.scale, z * self.scale);
        }
        (x, y, z)
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let (cx, cy, cz) = self.apply_point(b.cx, b.cy, b.cz);
        let mut yaw = b.yaw;
        if self.flip_y {
            yaw = -yaw;
        }
        if self.rotation != 0.0 {
            yaw += self.rotation;
        }
        let k = self.scale;
        Box3D { cx, cy, cz, w: b.w * k, l: b.l * k, h: b.h * k, yaw: normalize_angle(yaw) }
    }

    pub fn apply(&self, frame: &Frame) -> Frame {
        let mut out = frame.clone();
        for p in &mut out.cloud.points {
            (p.x, p.y, p.z) = self.apply_point(p.x, p.y, p.z);
        }
        for b in out.gt_boxes.iter_mut().chain(out.ignore_boxes.iter_mut()) {
            *b = self.apply_box(b);
        }
        out
    }
}

/// Seeded global flip, rotation and scaling of points and boxes together.
pub fn global_augment(frame: &Frame, cfg: &AugmentConfig, seed: u64) -> Frame {
    GlobalTransform::draw(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).apply(frame)
}

/// Moves each vehicle box (and its points) by a small random rotation about
/// its own centre and a planar shift. A move that would collide with another
/// box is skipped.
pub fn local_jitter(frame: &Frame, cfg: &AugmentConfig, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frame.clone();
    for k in 0..out.gt_boxes.len() {
        let b = out.gt_boxes[k];
        let r = cfg.local_rotation;
        let t = cfg.local_translation;
        let dth = if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let (dx, dy) = if t > 0.0 { (rng.gen_range(-t..=t), rng.gen_range(-t..=t)) } else { (0.0, 0.0) };
        let moved = Box3D { cx: b.cx + dx, cy: b.cy + dy, yaw: normalize_angle(b.yaw + dth), ..b };
        let others: Vec<Box3D> = out
            .gt_boxes
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, o)| *o)
            .chain(out.ignore_boxes.iter().copied())
            .collect();
        if collides(&moved, &others) {
            continue;
        }
        let (s, c) = dth.sin_cos();
        for p in &mut out.cloud.points {
            if b.contains(p.x, p.y, p.z) {
                let (lx, ly) = (p.x - b.cx, p.y - b.cy);
                p.x = b.cx + c * lx - s * ly + dx;
                p.y = b.cy + s * lx + c * ly + dy;
            }
        }
        out.gt_boxes[k] = moved;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Database objects pasted per frame; 0 disables sampling.
    pub max_pasted: usize,
    pub flip_probability: f64,
    pub rotation_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub local_noise: bool,
    /// Half-width of the per-object yaw perturbation, radians.
    pub local_rotation: f64,
    /// Half-width of the per-object shift along x and y, metres.
    pub local_translation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            max_pasted: 0,
            flip_probability: 0.5,
            rotation_range: [-FRAC_PI_4, FRAC_PI_4],
            scale_range: [0.95, 1.05],
            local_noise: false,
            local_rotation: std::f64::consts::PI / 20.0,
            local_translation: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |[lo, hi]: [f64; 2]| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!("flip_probability {} outside [0, 1]", self.flip_probability)));
        }
        if !ordered(self.rotation_range) || !ordered(self.scale_range) || self.scale_range[0] <= 0.0 {
            return Err(Error::Config("augmentation ranges must be finite, ordered, with positive scale".into()));
        }
        if !(self.local_rotation >= 0.0 && self.local_translation >= 0.0) {
            return Err(Error::Config("local noise widths must be non-negative".into()));
        }
        Ok(())
    }
}

/// Full training-time pipeline: database paste, optional per-object noise,
/// then the global transform. Disabled configs return the frame unchanged.
pub fn augment_frame(frame: &Frame, db: Option<&GtSampleDatabase>, cfg: &AugmentConfig, seed: u64) -> Result<Frame> {
    if !cfg.enabled {
        return Ok(frame.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = match db {
        Some(db) if cfg.max_pasted > 0 && !db.is_empty() => sample_and_paste(frame, db, cfg.max_pasted, rng.gen())?,
        _ => frame.clone(),
    };
    if cfg.local_noise {
        f = local_jitter(&f, cfg, rng.gen());
    }
    Ok(global_augment(&f, cfg, rng.gen()))
}
