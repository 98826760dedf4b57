//! Object label rows: `type trunc occ alpha x1 y1 x2 y2 h w l x y z ry [score]`.
//! Locations are in the rectified camera frame at the bottom face centre.

use std::path::Path;

use super::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::geom::{normalize_angle, Box3D};

pub const DONT_CARE: &str = "DontCare";

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLabel {
    pub class: String,
    pub truncation: f64,
    /// 0..=3, or -1 on rows that do not carry it.
    pub occlusion: i32,
    pub alpha: f64,
    /// `[x1, y1, x2, y2]` pixels.
    pub bbox: [f64; 4],
    /// `[h, w, l]` metres.
    pub dims: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl GroundTruthLabel {
    pub fn is_dont_care(&self) -> bool {
        self.class == DONT_CARE
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn has_valid_box(&self) -> bool {
        self.dims.iter().all(|&d| d > 0.0)
    }

    /// 3D box in the lidar frame.
    pub fn to_box3d(&self, calib: &CalibrationSet) -> Result<Box3D> {
        let [h, w, l] = self.dims;
        let [x, y, z] = self.location;
        // camera y points down: geometric centre sits h/2 above the bottom face
        let c = calib.rect_to_lidar([x, y - h / 2.0, z]);
        let ry = self.rotation_y;
        let d = calib.rect_dir_to_lidar([ry.cos(), 0.0, -ry.sin()]);
        Box3D::new(c[0], c[1], c[2], w, l, h, d[1].atan2(d[0]))
    }

    /// Label row for a lidar-frame box; the 2D box is the image-clipped
    /// extent of the projected corners.
    pub fn from_box3d(
        class: &str,
        b: &Box3D,
        calib: &CalibrationSet,
        image_size: (usize, usize),
        score: Option<f64>,
    ) -> Self {
        let c = calib.lidar_to_rect([b.cx, b.cy, b.cz]);
        let location = [c[0], c[1] + b.h / 2.0, c[2]];
        let d = calib.lidar_dir_to_rect([b.yaw.cos(), b.yaw.sin(), 0.0]);
        let rotation_y = normalize_angle((-d[2]).atan2(d[0]));
        let alpha = normalize_angle(rotation_y - c[0].atan2(c[2]));
        Self {
            class: class.to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha,
            bbox: image_bbox(b, calib, image_size),
            dims: [b.h, b.w, b.l],
            location,
            rotation_y,
            score,
        }
    }
}

/// Extent of the projected corners in front of the camera, clipped to the
/// image. All zeros when no corner is in front.
pub fn image_bbox(b: &Box3D, calib: &CalibrationSet, (width, height): (usize, usize)) -> [f64; 4] {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in b.corners() {
        let r = calib.lidar_to_rect(p);
        if r[2] <= 1e-3 {
            continue;
        }
        let h = calib.rect_to_image_h(r);
        for k in 0..2 {
            let v = h[k] / h[2];
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    if !lo[0].is_finite() {
        return [0.0; 4];
    }
    let (w, h) = ((width as f64 - 1.0).max(0.0), (height as f64 - 1.0).max(0.0));
    [lo[0].clamp(0.0, w), lo[1].clamp(0.0, h), hi[0].clamp(0.0, w), hi[1].clamp(0.0, h)]
}

pub fn parse_label_line(line: &str, path: &Path, lineno: usize) -> Result<GroundTruthLabel> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 15 && fields.len() != 16 {
        return Err(Error::format(
            path,
            Some(lineno),
            format!("expected 15 or 16 fields, found {}", fields.len()),
        ));
    }
    let num = |k: usize| -> Result<f64> {
        fields[k]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::format(path, Some(lineno), format!("field {} ({:?}) is not a finite number", k + 1, fields[k])))
    };
    let occ = num(2)?;
    if occ.fract() != 0.0 {
        return Err(Error::format(path, Some(lineno), format!("occlusion {occ} is not an integer")));
    }
    let label = GroundTruthLabel {
        class: fields[0].to_string(),
        truncation: num(1)?,
        occlusion: occ as i32,
        alpha: num(3)?,
        bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
        dims: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        score: if fields.len() == 16 { Some(num(15)?) } else { None },
    };
    if !label.is_dont_care() && !(0..=3).contains(&label.occlusion) {
        return Err(Error::format(path, Some(lineno), format!("occlusion {} outside 0..=3", label.occlusion)));
    }
    if label.class == "Car" && !label.has_valid_box() {
        return Err(Error::format(path, Some(lineno), "Car with non-positive dimensions"));
    }
    Ok(label)
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<GroundTruthLabel>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l, path, i + 1))
        .collect()
}

pub fn load_labels(path: &Path) -> Result<Vec<GroundTruthLabel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn format_label(l: &GroundTruthLabel) -> String {
    let mut s = format!(
        "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
        l.class,
        l.truncation,
        l.occlusion,
        l.alpha,
        l.bbox[0],
        l.bbox[1],
        l.bbox[2],
        l.bbox[3],
        l.dims[0],
        l.dims[1],
        l.dims[2],
        l.location[0],
        l.location[1],
        l.location[2],
        l.rotation_y,
    );
    if let Some(sc) = l.score {
        s.push_str(&format!(" {sc}"));
    }
    s
}

pub fn format_labels(labels: &[GroundTruthLabel]) -> String {
    labels.iter().map(|l| format_label(l) + "\n").collect()
}

pub fn write_labels(labels: &[GroundTruthLabel], path: &Path) -> Result<()> {
    std::fs::write(path, format_labels(labels)).map_err(|e| Error::io(path, e))
}
