//! KITTI-layout frame ingestion: lidar binaries, calibration, labels and
//! camera images, plus lidar-to-image projection.

mod calib;
mod image;
mod labels;
mod pointcloud;
mod projection;

pub use calib::{
    format_calibration, load_calibration, parse_calibration, write_calibration, CalibrationSet, Mat3, Mat34,
    IDENTITY3,
};
pub use image::{encode_ppm, load_image, parse_ppm, write_image, ImageRaster};
pub use labels::{
    format_label, format_labels, image_bbox, load_labels, parse_label_line, parse_labels, write_labels,
    GroundTruthLabel, DONT_CARE,
};
pub use pointcloud::{encode_pointcloud, load_pointcloud, parse_pointcloud, write_pointcloud, Point, RawPointCloud};
pub use projection::{
    attach_rgb, nearest_pixel, project_point, project_points, DecoratedPointCloud, Projection,
};
