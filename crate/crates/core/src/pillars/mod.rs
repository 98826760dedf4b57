//! Point decoration, pillar grouping and scattering of pillar features into
//! a bird's-eye pseudo-image.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{scatter_rows_to_grid, Tensor};
use crate::error::{Error, Result};
use crate::kittio::Point;

/// `(x, y, z, r, xc, yc, zc, xp, yp)`.
pub const LIDAR_CHANNELS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PillarGridConfig {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub pillar_size: f64,
    pub max_pillars: usize,
    pub max_points: usize,
}

impl Default for PillarGridConfig {
    fn default() -> Self {
        Self {
            x_range: [0.0, 69.12],
            y_range: [-39.68, 39.68],
            z_range: [-3.0, 1.0],
            pillar_size: 0.16,
            max_pillars: 12000,
            max_points: 100,
        }
    }
}

fn cells_along(range: [f64; 2], size: f64) -> f64 {
    (range[1] - range[0]) / size
}

impl PillarGridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pillar_size > 0.0) || !self.pillar_size.is_finite() {
            return Err(Error::Config(format!("pillar size {} must be positive", self.pillar_size)));
        }
        for (name, r) in [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)] {
            if !(r[1] > r[0]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::Config(format!("{name} range {r:?} is empty")));
            }
        }
        for (name, r) in [("x", self.x_range), ("y", self.y_range)] {
            let n = cells_along(r, self.pillar_size);
            if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
                return Err(Error::Config(format!(
                    "{name} range {r:?} is not a whole number of {} m pillars",
                    self.pillar_size
                )));
            }
        }
        if self.max_pillars == 0 || self.max_points == 0 {
            return Err(Error::Config("max pillars and max points per pillar must be at least 1".into()));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        cells_along(self.x_range, self.pillar_size).round() as usize
    }

    pub fn ny(&self) -> usize {
        cells_along(self.y_range, self.pillar_size).round() as usize
    }

    /// `(ix, iy)` of the pillar containing `(x, y, z)`; `None` outside the
    /// half-open x/y extent or the closed z extent.
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<[usize; 2]> {
        if !(z >= self.z_range[0] && z <= self.z_range[1]) {
            return None;
        }
        let fx = ((x - self.x_range[0]) / self.pillar_size).floor();
        let fy = ((y - self.y_range[0]) / self.pillar_size).floor();
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        (ix < self.nx() && iy < self.ny()).then_some([ix, iy])
    }

    pub fn cell_center(&self, [ix, iy]: [usize; 2]) -> [f64; 2] {
        [
            self.x_range[0] + (ix as f64 + 0.5) * self.pillar_size,
            self.y_range[0] + (iy as f64 + 0.5) * self.pillar_size,
        ]
    }
}

/// Per-point decorated features for the points inside the grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointDecoration {
    pub features: Vec<[f64; LIDAR_CHANNELS]>,
    pub cells: Vec<[usize; 2]>,
    /// Index of each retained point in the input slice.
    pub source: Vec<usize>,
}

impl PointDecoration {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn decorate_points(points: &[Point], cfg: &PillarGridConfig) -> Result<PointDecoration> {
    cfg.validate()?;
    let nx = cfg.nx();
    let mut cells = Vec::new();
    let mut source = Vec::new();
    let mut sums: std::collections::HashMap<usize, ([f64; 3], usize)> = Default::default();
    for (i, p) in points.iter().enumerate() {
        if let Some(c) = cfg.cell_of(p.x, p.y, p.z) {
            let e = sums.entry(c[1] * nx + c[0]).or_insert(([0.0; 3], 0));
            e.0[0] += p.x;
            e.0[1] += p.y;
            e.0[2] += p.z;
            e.1 += 1;
            cells.push(c);
            source.push(i);
        }
    }
    let features = source
        .iter()
        .zip(&cells)
        .map(|(&i, &c)| {
            let p = points[i];
            let (s, n) = sums[&(c[1] * nx + c[0])];
            let n = n as f64;
            let centre = cfg.cell_center(c);
            [
                p.x,
                p.y,
                p.z,
                p.r,
                p.x - s[0] / n,
                p.y - s[1] / n,
                p.z - s[2] / n,
                p.x - centre[0],
                p.y - centre[1],
            ]
        })
        .collect();
    Ok(PointDecoration { features, cells, source })
}

/// Non-empty pillars with their (possibly subsampled) member points.
///
/// Points are stored compactly: `points` holds one row per kept point, in
/// pillar order, and `groups[p]` lists the rows of pillar `p`. The padded
/// `[P, N, C]` view is available through [`PillarBatch::padded_features`].
#[derive(Debug, Clone)]
pub struct PillarBatch {
    pub coords: Vec<[usize; 2]>,
    pub points: Tensor,
    pub groups: Vec<Vec<usize>>,
    /// Row of the decoration each kept point came from.
    pub rows: Vec<usize>,
    pub max_points: usize,
}

impl PillarBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.rows.len()
    }

    /// Flat `iy·nx + ix` cell index per pillar.
    pub fn cells(&self, nx: usize) -> Vec<usize> {
        self.coords.iter().map(|c| c[1] * nx + c[0]).collect()
    }

    /// `[P·N]` slot mask, row-major by pillar.
    pub fn mask(&self) -> Vec<bool> {
        let n = self.max_points;
        let mut m = vec![false; self.len() * n];
        for (p, g) in self.groups.iter().enumerate() {
            m[p * n..p * n + g.len()].iter_mut().for_each(|v| *v = true);
        }
        m
    }

    /// `[P, N, C]` with masked-out slots zero.
    pub fn padded_features(&self) -> Tensor {
        let (n, c) = (self.max_points, self.points.shape()[1]);
        let src = self.points.data();
        let mut out = vec![0.0; self.len() * n * c];
        for (p, g) in self.groups.iter().enumerate() {
            for (slot, &row) in g.iter().enumerate() {
                out[(p * n + slot) * c..(p * n + slot + 1) * c].copy_from_slice(&src[row * c..(row + 1) * c]);
            }
        }
        Tensor::new(&[self.len(), n, c], out).expect("consistent shape")
    }
}

/// Groups decorated points by pillar. Pillars are ordered by flat cell
/// index. When there are more than `max_pillars` non-empty pillars a
/// uniform random subset is kept, and pillars holding more than
/// `max_points` points keep a uniform random subset; both draws come from a
/// ChaCha8 stream seeded by `seed`, pillar selection first.
pub fn build_pillar_batch(dec: &PointDecoration, cfg: &PillarGridConfig, seed: u64) -> Result<PillarBatch> {
    cfg.validate()?;
    let nx = cfg.nx();
    let mut by_cell: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (row, c) in dec.cells.iter().enumerate() {
        by_cell.entry(c[1] * nx + c[0]).or_default().push(row);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pillars: Vec<(usize, Vec<usize>)> = by_cell.into_iter().collect();
    if pillars.len() > cfg.max_pillars {
        let mut keep = index::sample(&mut rng, pillars.len(), cfg.max_pillars).into_vec();
        keep.sort_unstable();
        pillars = keep.into_iter().map(|i| std::mem::take(&mut pillars[i])).collect();
    }
    let mut coords = Vec::with_capacity(pillars.len());
    let mut groups = Vec::with_capacity(pillars.len());
    let mut rows = Vec::new();
    for (cell, mut members) in pillars {
        if members.len() > cfg.max_points {
            let mut keep = index::sample(&mut rng, members.len(), cfg.max_points).into_vec();
            keep.sort_unstable();
            members = keep.into_iter().map(|i| members[i]).collect();
        }
        coords.push([cell % nx, cell / nx]);
        groups.push((rows.len()..rows.len() + members.len()).collect());
        rows.extend(members);
    }
    let data = rows.iter().flat_map(|&r| dec.features[r]).collect();
    Ok(PillarBatch {
        coords,
        points: Tensor::new(&[rows.len(), LIDAR_CHANNELS], data)?,
        groups,
        rows,
        max_points: cfg.max_points,
    })
}

/// `[P, C]` pillar features → `[C, ny, nx]` with `out[:, iy, ix]` = the
/// pillar at `(ix, iy)`. Differentiable in `features`.
pub fn scatter_to_pseudo_image(features: &Tensor, coords: &[[usize; 2]], cfg: &PillarGridConfig) -> Result<Tensor> {
    let (nx, ny) = (cfg.nx(), cfg.ny());
    if let Some(c) = coords.iter().find(|c| c[0] >= nx || c[1] >= ny) {
        return Err(Error::contract(format!("pillar {c:?} outside {nx}x{ny} grid")));
    }
    let cells: Vec<usize> = coords.iter().map(|c| c[1] * nx + c[0]).collect();
    scatter_rows_to_grid(features, &cells, ny, nx)
}

/// Reads back the `[P, C]` columns at `coords` (values only).
pub fn gather_from_pseudo_image(image: &Tensor, coords: &[[usize; 2]]) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("pseudo-image must be [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(coords.len() * c);
    for &[ix, iy] in coords {
        if ix >= w || iy >= h {
            return Err(Error::contract(format!("({ix}, {iy}) outside {w}x{h} image")));
        }
        out.extend((0..c).map(|ch| d[ch * h * w + iy * w + ix]));
    }
    Tensor::new(&[coords.len(), c], out)
}
