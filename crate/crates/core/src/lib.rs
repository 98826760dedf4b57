//! Lidar + RGB pillar detector with channel-attention fusion, and a
//! KITTI-style evaluation toolkit.

pub mod augment;
pub mod dataset;
pub mod diffcore;
pub mod evalkit;
pub mod fusion;
pub mod geom;
pub mod kittio;
pub mod net;
pub mod parallel;
pub mod pillars;
pub mod synthetic;

mod error;

pub use error::{Error, Result};
