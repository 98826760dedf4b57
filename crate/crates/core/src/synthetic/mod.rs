//! Procedural KITTI-layout scenes: cars plus look-alike distractors that
//! share the cars' geometry and differ only in colour.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::geom::{bev_iou, Box3D};
use crate::kittio::{
    attach_rgb, image_bbox, project_points, write_calibration, write_image, write_labels, write_pointcloud,
    CalibrationSet, GroundTruthLabel, ImageRaster, Point, RawPointCloud, IDENTITY3,
};

/// Label class written for distractor objects.
pub const DISTRACTOR_CLASS: &str = "Misc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Region object centres are drawn from (lidar frame, metres).
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub cars: [usize; 2],
    pub distractors: [usize; 2],
    /// Object size `(w, l, h)`; cars and distractors share it.
    pub object_size: [f64; 3],
    /// Relative size jitter.
    pub size_jitter: f64,
    pub ground_z: f64,
    pub points_per_object: usize,
    pub ground_points: usize,
    /// Extent of the ground returns.
    pub ground_x: [f64; 2],
    pub ground_y: [f64; 2],
    pub image_size: [usize; 2],
    pub focal: f64,
    pub principal: [f64; 2],
    pub car_color: [u8; 3],
    pub distractor_color: [u8; 3],
    pub color_jitter: u8,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            x_range: [3.0, 6.0],
            y_range: [-2.5, 2.5],
            cars: [1, 2],
            distractors: [1, 2],
            object_size: [1.6, 3.9, 1.56],
            size_jitter: 0.05,
            ground_z: -1.78,
            points_per_object: 60,
            ground_points: 80,
            ground_x: [0.0, 8.0],
            ground_y: [-4.0, 4.0],
            image_size: [512, 160],
            focal: 256.0,
            principal: [256.0, 40.0],
            car_color: [200, 40, 40],
            distractor_color: [40, 60, 200],
            color_jitter: 20,
        }
    }
}

impl SceneConfig {
    /// Same layout rules scaled to an arbitrary grid extent.
    pub fn for_extent(x: [f64; 2], y: [f64; 2]) -> Self {
        let margin = 2.0;
        Self {
            x_range: [x[0] + 3.0, x[1] - margin],
            y_range: [y[0] + margin, y[1] - margin],
            ground_x: x,
            ground_y: y,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x_range[1] > self.x_range[0]
            && self.y_range[1] > self.y_range[0]
            && self.cars[0] <= self.cars[1]
            && self.distractors[0] <= self.distractors[1]
            && self.object_size.iter().all(|&s| s > 0.0)
            && self.image_size.iter().all(|&s| s > 0)
            && self.focal > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid synthetic scene settings {self:?}")));
        }
        Ok(())
    }

    /// Lidar `x` forward → camera `z`, lidar `y` left → camera `-x`, lidar
    /// `z` up → camera `-y`; both sensors at the origin.
    pub fn calibration(&self) -> CalibrationSet {
        let (f, [cx, cy]) = (self.focal, self.principal);
        CalibrationSet {
            p2: [[f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]],
            r0_rect: IDENTITY3,
            tr_velo_to_cam: [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub id: String,
    pub cloud: RawPointCloud,
    pub image: ImageRaster,
    pub calib: CalibrationSet,
    pub labels: Vec<GroundTruthLabel>,
    pub cars: Vec<Box3D>,
    pub distractors: Vec<Box3D>,
}

/// Points on the side and top faces of `b`.
fn surface_points(b: &Box3D, n: usize, rng: &mut impl Rng) -> Vec<Point> {
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let side_l = b.l * b.h;
    let side_w = b.w * b.h;
    let top = b.l * b.w;
    let total = 2.0 * side_l + 2.0 * side_w + top;
    (0..n)
        .map(|_| {
            let pick = rng.gen_range(0.0..total);
            let (u, v, z) = if pick < 2.0 * side_l {
                let sign = if pick < side_l { 1.0 } else { -1.0 };
                (rng.gen_range(-0.5..0.5) * b.l, sign * 0.5 * b.w, rng.gen_range(-0.5..0.5) * b.h)
            } else if pick < 2.0 * side_l + 2.0 * side_w {
                let sign = if pick < 2.0 * side_l + side_w { 1.0 } else { -1.0 };
                (sign * 0.5 * b.l, rng.gen_range(-0.5..0.5) * b.w, rng.gen_range(-0.5..0.5) * b.h)
            } else {
                (rng.gen_range(-0.5..0.5) * b.l, rng.gen_range(-0.5..0.5) * b.w, 0.5 * b.h)
            };
            Point::new(b.cx + c * u - s * v, b.cy + s * u + c * v, b.cz + z, rng.gen_range(0.2..0.8)).quantized()
        })
        .collect()
}

fn jitter(base: [u8; 3], amount: u8, rng: &mut impl Rng) -> [u8; 3] {
    let a = amount as i32;
    base.map(|c| (c as i32 + rng.gen_range(-a..=a)).clamp(0, 255) as u8)
}

/// Objects are placed without BEV overlap (with a small clearance); a draw
/// that cannot be placed after a bounded number of attempts is dropped.
fn place_objects(cfg: &SceneConfig, n: usize, placed: &mut Vec<Box3D>, rng: &mut impl Rng) -> Vec<Box3D> {
    let mut out = Vec::new();
    for _ in 0..n {
        for _attempt in 0..100 {
            let k = 1.0 + rng.gen_range(-cfg.size_jitter..=cfg.size_jitter);
            let [w, l, h] = cfg.object_size.map(|s| s * k);
            let b = Box3D::new(
                rng.gen_range(cfg.x_range[0]..=cfg.x_range[1]),
                rng.gen_range(cfg.y_range[0]..=cfg.y_range[1]),
                cfg.ground_z + h / 2.0,
                w,
                l,
                h,
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            )
            .expect("positive dims");
            let grown = Box3D { w: b.w + 0.4, l: b.l + 0.4, ..b };
            if placed.iter().all(|p| bev_iou(&grown, p).unwrap_or(1.0) == 0.0) {
                placed.push(b);
                out.push(b);
                break;
            }
        }
    }
    out
}

/// Paints every object's projected extent, far to near.
fn render(cfg: &SceneConfig, calib: &CalibrationSet, objects: &[(Box3D, [u8; 3])], rng: &mut impl Rng) -> ImageRaster {
    let [w, h] = cfg.image_size;
    let mut img = ImageRaster::filled(w, h, [0, 0, 0]);
    for v in 0..h {
        for u in 0..w {
            img.set_pixel(u, v, jitter([110, 110, 110], 12, rng));
        }
    }
    let mut order: Vec<&(Box3D, [u8; 3])> = objects.iter().collect();
    order.sort_by(|a, b| b.0.cx.hypot(b.0.cy).total_cmp(&a.0.cx.hypot(a.0.cy)));
    for (b, color) in order {
        let bb = image_bbox(b, calib, (w, h));
        if bb[2] <= bb[0] || bb[3] <= bb[1] {
            continue;
        }
        for v in bb[1].floor() as usize..=(bb[3].ceil() as usize).min(h - 1) {
            for u in bb[0].floor() as usize..=(bb[2].ceil() as usize).min(w - 1) {
                img.set_pixel(u, v, *color);
            }
        }
    }
    img
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64, id: &str) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib = cfg.calibration();
    let mut placed = Vec::new();
    let n_cars = rng.gen_range(cfg.cars[0]..=cfg.cars[1]);
    let n_dis = rng.gen_range(cfg.distractors[0]..=cfg.distractors[1]);
    let cars = place_objects(cfg, n_cars, &mut placed, &mut rng);
    let distractors = place_objects(cfg, n_dis, &mut placed, &mut rng);
    Ok(assemble(cfg, &calib, id, cars, distractors, &mut rng))
}

/// Scene with the given boxes; only point/colour noise is random.
pub fn scene_with_objects(
    cfg: &SceneConfig,
    seed: u64,
    id: &str,
    cars: Vec<Box3D>,
    distractors: Vec<Box3D>,
) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(assemble(cfg, &cfg.calibration(), id, cars, distractors, &mut rng))
}

fn assemble(
    cfg: &SceneConfig,
    calib: &CalibrationSet,
    id: &str,
    cars: Vec<Box3D>,
    distractors: Vec<Box3D>,
    rng: &mut ChaCha8Rng,
) -> SyntheticScene {
    let mut points = Vec::new();
    let mut painted = Vec::new();
    for (boxes, base) in [(&cars, cfg.car_color), (&distractors, cfg.distractor_color)] {
        for b in boxes.iter() {
            points.extend(surface_points(b, cfg.points_per_object, rng));
            painted.push((*b, jitter(base, cfg.color_jitter, rng)));
        }
    }
    for _ in 0..cfg.ground_points {
        let p = Point::new(
            rng.gen_range(cfg.ground_x[0]..cfg.ground_x[1]),
            rng.gen_range(cfg.ground_y[0]..cfg.ground_y[1]),
            cfg.ground_z + rng.gen_range(-0.03..0.03),
            rng.gen_range(0.05..0.3),
        )
        .quantized();
        if !painted.iter().any(|(b, _)| b.contains_bev(p.x, p.y)) {
            points.push(p);
        }
    }
    let image = render(cfg, calib, &painted, rng);
    let size = (cfg.image_size[0], cfg.image_size[1]);
    let mut labels: Vec<GroundTruthLabel> = cars
        .iter()
        .map(|b| GroundTruthLabel::from_box3d("Car", b, calib, size, None))
        .collect();
    labels.extend(
        distractors
            .iter()
            .map(|b| GroundTruthLabel::from_box3d(DISTRACTOR_CLASS, b, calib, size, None)),
    );
    SyntheticScene {
        id: id.to_string(),
        cloud: RawPointCloud { points },
        image,
        calib: calib.clone(),
        labels,
        cars,
        distractors,
    }
}

impl SyntheticScene {
    /// Projects, attaches colours and collects the car boxes.
    pub fn to_frame(&self) -> Frame {
        let proj = project_points(&self.cloud, &self.calib, &self.image);
        Frame {
            id: self.id.clone(),
            cloud: attach_rgb(&self.cloud, &proj, &self.image),
            gt_boxes: self.cars.clone(),
            ignore_boxes: Vec::new(),
        }
    }

    /// Writes `velodyne/`, `calib/`, `image_2/` and `label_2/` entries.
    pub fn write(&self, root: &Path) -> Result<()> {
        for dir in ["velodyne", "calib", "image_2", "label_2"] {
            let d = root.join(dir);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        write_pointcloud(&self.cloud, &root.join("velodyne").join(format!("{}.bin", self.id)))?;
        write_calibration(&self.calib, &root.join("calib").join(format!("{}.txt", self.id)))?;
        write_image(&self.image, &root.join("image_2").join(format!("{}.ppm", self.id)))?;
        write_labels(&self.labels, &root.join("label_2").join(format!("{}.txt", self.id)))
    }
}

/// The fixed two-car scene used for overfitting checks on the default
/// 8 m × 8 m grid.
pub fn two_car_scene(seed: u64) -> SyntheticScene {
    let cfg = SceneConfig {
        points_per_object: 80,
        ..SceneConfig::default()
    };
    let h = cfg.object_size[2];
    let z = cfg.ground_z + h / 2.0;
    let [w, l, _] = cfg.object_size;
    let cars = vec![
        Box3D::new(3.6, -2.4, z, w, l, h, 0.15).expect("valid"),
        Box3D::new(5.7, 1.6, z, w, l, h, 1.45).expect("valid"),
    ];
    scene_with_objects(&cfg, seed, "000000", cars, Vec::new()).expect("default config is valid")
}
