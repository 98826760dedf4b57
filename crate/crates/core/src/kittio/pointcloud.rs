use std::path::Path;

use crate::error::{Error, Result};

/// One lidar return: metres in the lidar frame plus reflectance in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    /// Rounds every field to the nearest `f32`, i.e. to what a `.bin` file
    /// can store.
    pub fn quantized(self) -> Self {
        Self {
            x: self.x as f32 as f64,
            y: self.y as f32 as f64,
            z: self.z as f32 as f64,
            r: self.r as f32 as f64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawPointCloud {
    pub points: Vec<Point>,
}

impl RawPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Parses little-endian `f32` quadruples `(x, y, z, r)`.
pub fn parse_pointcloud(bytes: &[u8], path: &Path) -> Result<RawPointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::format(
            path,
            None,
            format!("{} bytes is not a whole number of 16-byte points", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, chunk) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        let p = Point::new(f(0), f(1), f(2), f(3));
        if ![p.x, p.y, p.z, p.r].iter().all(|v| v.is_finite()) {
            return Err(Error::format(path, None, format!("point {i} is not finite")));
        }
        if !(0.0..=1.0).contains(&p.r) {
            return Err(Error::format(path, None, format!("point {i} reflectance {} outside [0,1]", p.r)));
        }
        points.push(p);
    }
    Ok(RawPointCloud { points })
}

pub fn load_pointcloud(path: &Path) -> Result<RawPointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pointcloud(&bytes, path)
}

pub fn encode_pointcloud(cloud: &RawPointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_pointcloud(cloud: &RawPointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pointcloud(cloud)).map_err(|e| Error::io(path, e))
}
