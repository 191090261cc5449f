//! Pillar rasterization and the deterministic per-pillar feature encoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Point, PointCloud};
use crate::tensor::FeatureMap;

/// Number of statistics written by [`encode_pillars`] before zero padding.
pub const PILLAR_STATS: usize = 6;

/// BEV extent and pillar size. Rows index `x`, columns index `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub range_x: (f64, f64),
    pub range_y: (f64, f64),
    pub meters_per_cell: f64,
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self {
            range_x: (-28.8, 28.8),
            range_y: (-28.8, 28.8),
            meters_per_cell: 0.45,
        }
    }
}

impl GridGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.meters_per_cell > 0.0) {
            return Err(Error::Precondition("meters_per_cell must be positive".into()));
        }
        if !(self.range_x.1 > self.range_x.0) || !(self.range_y.1 > self.range_y.0) {
            return Err(Error::Precondition("grid range is degenerate".into()));
        }
        Ok(())
    }

    fn cells_along(&self, lo: f64, hi: f64) -> usize {
        // guard against extent/size landing a hair above an integer
        ((hi - lo) / self.meters_per_cell - 1e-9).ceil() as usize
    }

    pub fn height(&self) -> usize {
        self.cells_along(self.range_x.0, self.range_x.1)
    }

    pub fn width(&self) -> usize {
        self.cells_along(self.range_y.0, self.range_y.1)
    }

    /// Half-open floor indexing; `None` outside `[lo, hi)` on either axis.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.range_x.0 && x < self.range_x.1 && y >= self.range_y.0 && y < self.range_y.1)
        {
            return None;
        }
        let i = ((x - self.range_x.0) / self.meters_per_cell).floor() as usize;
        let j = ((y - self.range_y.0) / self.meters_per_cell).floor() as usize;
        Some((i.min(self.height() - 1), j.min(self.width() - 1)))
    }
}

/// Sparse pillar occupancy: only non-empty cells are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarGrid {
    pub geometry: GridGeometry,
    pub height: usize,
    pub width: usize,
    pub cells: BTreeMap<(usize, usize), Vec<Point>>,
}

impl PillarGrid {
    pub fn occupied(&self) -> usize {
        self.cells.len()
    }
}

pub fn pillarize(cloud: &PointCloud, geometry: &GridGeometry) -> Result<PillarGrid> {
    geometry.validate()?;
    let mut cells: BTreeMap<(usize, usize), Vec<Point>> = BTreeMap::new();
    for p in &cloud.points {
        if let Some(ij) = geometry.cell_of(p.x, p.y) {
            cells.entry(ij).or_default().push(*p);
        }
    }
    Ok(PillarGrid {
        geometry: *geometry,
        height: geometry.height(),
        width: geometry.width(),
        cells,
    })
}

/// Per-pillar statistics `[log1p(count), mean intensity, mean z, max z, mean speed, 1]`,
/// zero-padded to `channels`. Empty pillars stay all-zero.
pub fn encode_pillars(grid: &PillarGrid, channels: usize) -> Result<FeatureMap> {
    if channels < PILLAR_STATS {
        return Err(Error::Precondition(format!(
            "pillar encoding needs at least {PILLAR_STATS} channels, got {channels}"
        )));
    }
    let mut out = FeatureMap::zeros(channels, grid.height, grid.width)?
        .with_geometry(1, grid.geometry.meters_per_cell)?;
    let plane = grid.height * grid.width;
    let values = out.values_mut();
    for (&(i, j), pts) in &grid.cells {
        let stats = pillar_stats(pts);
        let k = i * grid.width + j;
        for (c, s) in stats.iter().enumerate() {
            values[c * plane + k] = *s;
        }
    }
    Ok(out)
}

fn pillar_stats(pts: &[Point]) -> [f64; PILLAR_STATS] {
    let n = pts.len() as f64;
    let (mut si, mut sz, mut sv) = (0.0, 0.0, 0.0);
    let mut zmax = f64::NEG_INFINITY;
    for p in pts {
        si += p.intensity;
        sz += p.z;
        sv += p.speed();
        zmax = zmax.max(p.z);
    }
    [n.ln_1p(), si / n, sz / n, zmax, sv / n, 1.0]
}
