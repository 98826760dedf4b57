//! Training/inference frames and their KITTI-layout storage.
//!
//! A dataset root holds `velodyne/<id>.bin`, `calib/<id>.txt`,
//! `label_2/<id>.txt` and `image_2/<id>.ppm`. Frame ids come from the
//! velodyne directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geom::Box3D;
use crate::kittio::{
    attach_rgb, load_calibration, load_image, load_labels, load_pointcloud, project_points, CalibrationSet,
    DecoratedPointCloud, GroundTruthLabel,
};

pub const VEHICLE_CLASS: &str = "Car";
/// Vehicle-like classes that are neither positives nor negatives.
pub const IGNORED_CLASSES: [&str; 1] = ["Van"];

/// One lidar sweep with attached colours and its lidar-frame boxes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    pub id: String,
    pub cloud: DecoratedPointCloud,
    /// Vehicles to detect.
    pub gt_boxes: Vec<Box3D>,
    /// Objects the detector is neither rewarded nor penalised for.
    pub ignore_boxes: Vec<Box3D>,
}

impl Frame {
    /// Splits labels into vehicle and ignore boxes. Rows without a valid
    /// 3D box (DontCare) are skipped.
    pub fn from_labels(
        id: &str,
        cloud: DecoratedPointCloud,
        labels: &[GroundTruthLabel],
        calib: &CalibrationSet,
    ) -> Result<Self> {
        let mut frame = Frame { id: id.to_string(), cloud, ..Frame::default() };
        for l in labels.iter().filter(|l| l.has_valid_box()) {
            if l.class == VEHICLE_CLASS {
                frame.gt_boxes.push(l.to_box3d(calib)?);
            } else if IGNORED_CLASSES.contains(&l.class.as_str()) {
                frame.ignore_boxes.push(l.to_box3d(calib)?);
            }
        }
        Ok(frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Read `image_2/` and colour the points; otherwise every point is
    /// marked out of image.
    pub images: bool,
    /// Require `label_2/`; otherwise a missing label file means no objects.
    pub labels: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { images: true, labels: true }
    }
}

/// A frame plus the raw annotations it was built from.
#[derive(Debug, Clone)]
pub struct KittiFrame {
    pub frame: Frame,
    pub labels: Vec<GroundTruthLabel>,
    pub calib: CalibrationSet,
}

pub fn velodyne_path(root: &Path, id: &str) -> PathBuf {
    root.join("velodyne").join(format!("{id}.bin"))
}

pub fn calib_path(root: &Path, id: &str) -> PathBuf {
    root.join("calib").join(format!("{id}.txt"))
}

pub fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join("label_2").join(format!("{id}.txt"))
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("image_2").join(format!("{id}.ppm"))
}

/// Sorted ids of every `velodyne/*.bin`. An empty or absent directory is an
/// error naming it.
pub fn list_frame_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("velodyne");
    if !dir.is_dir() {
        return Err(Error::MissingPaths(vec![dir]));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptySet(format!("no frames in {}", dir.display())));
    }
    ids.sort();
    Ok(ids)
}

/// Every file `ids` need under `opts` that does not exist.
pub fn missing_files(root: &Path, ids: &[String], opts: LoadOptions) -> Vec<PathBuf> {
    let mut missing = Vec::new();
    for id in ids {
        let mut need = vec![velodyne_path(root, id), calib_path(root, id)];
        if opts.labels {
            need.push(label_path(root, id));
        }
        if opts.images {
            need.push(image_path(root, id));
        }
        missing.extend(need.into_iter().filter(|p| !p.is_file()));
    }
    missing
}

pub fn load_frame(root: &Path, id: &str, opts: LoadOptions) -> Result<KittiFrame> {
    let missing = missing_files(root, &[id.to_string()], opts);
    if !missing.is_empty() {
        return Err(Error::MissingPaths(missing));
    }
    let raw = load_pointcloud(&velodyne_path(root, id))?;
    let calib = load_calibration(&calib_path(root, id))?;
    let lp = label_path(root, id);
    let labels = if lp.is_file() { load_labels(&lp)? } else { Vec::new() };
    let cloud = if opts.images {
        let image = load_image(&image_path(root, id))?;
        attach_rgb(&raw, &project_points(&raw, &calib, &image), &image)
    } else {
        DecoratedPointCloud::without_image(&raw)
    };
    let frame = Frame::from_labels(id, cloud, &labels, &calib)?;
    Ok(KittiFrame { frame, labels, calib })
}

/// Loads every frame under `root` in id order, reporting all missing files
/// at once.
pub fn load_dataset(root: &Path, opts: LoadOptions) -> Result<Vec<KittiFrame>> {
    let ids = list_frame_ids(root)?;
    let missing = missing_files(root, &ids, opts);
    if !missing.is_empty() {
        return Err(Error::MissingPaths(missing));
    }
    ids.iter().map(|id| load_frame(root, id, opts)).collect()
}
