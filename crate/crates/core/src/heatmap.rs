//! Class heatmaps and Gaussian ground-truth rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pillar::GridGeometry;
use crate::scene::GtBox;
use crate::tensor::FeatureMap;

/// `K x H x W` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap(FeatureMap);

impl Heatmap {
    pub fn new(map: FeatureMap) -> Result<Self> {
        if let Some(v) = map.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self(map))
    }

    pub fn zeros(classes: usize, height: usize, width: usize) -> Result<Self> {
        Ok(Self(FeatureMap::zeros(classes, height, width)?))
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }
    pub fn height(&self) -> usize {
        self.0.height()
    }
    pub fn width(&self) -> usize {
        self.0.width()
    }
    pub fn map(&self) -> &FeatureMap {
        &self.0
    }
    pub fn into_map(self) -> FeatureMap {
        self.0
    }
    pub fn values(&self) -> &[f64] {
        self.0.values()
    }
    pub fn get(&self, k: usize, i: usize, j: usize) -> Result<f64> {
        self.0.get(k, i, j)
    }
}

/// Gaussian width rule: `sigma = max(length, width) / (divisor * cell)`, at least `min_sigma` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianRule {
    pub divisor: f64,
    pub min_sigma: f64,
    /// Stamps are truncated to a square window of `ceil(window_sigmas * sigma)` cells.
    pub window_sigmas: f64,
}

impl Default for GaussianRule {
    fn default() -> Self {
        Self {
            divisor: 6.0,
            min_sigma: 1.0,
            window_sigmas: 3.0,
        }
    }
}

impl GaussianRule {
    pub fn sigma_cells(&self, b: &GtBox, feature_cell: f64) -> f64 {
        (b.length.max(b.width) / (self.divisor * feature_cell)).max(self.min_sigma)
    }

    pub fn radius(&self, sigma: f64) -> usize {
        (self.window_sigmas * sigma).ceil() as usize
    }
}

/// Geometry of a stride-`stride` feature map over a pillar grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureGeometry {
    pub grid: GridGeometry,
    pub stride: usize,
}

impl FeatureGeometry {
    pub fn cell(&self) -> f64 {
        self.grid.meters_per_cell * self.stride as f64
    }
    pub fn height(&self) -> usize {
        self.grid.height() / self.stride
    }
    pub fn width(&self) -> usize {
        self.grid.width() / self.stride
    }

    /// Feature cell containing a BEV point, if inside the covered extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = (x - self.grid.range_x.0) / self.cell();
        let fj = (y - self.grid.range_y.0) / self.cell();
        if !(fi >= 0.0 && fj >= 0.0) {
            return None;
        }
        let (i, j) = (fi.floor() as usize, fj.floor() as usize);
        (i < self.height() && j < self.width()).then_some((i, j))
    }
}

#[derive(Debug, Clone)]
pub struct RenderedHeatmap {
    pub heatmap: Heatmap,
    /// Boxes skipped because their center fell outside the grid or their class is unknown.
    pub skipped: usize,
}

/// Renders one isotropic Gaussian per box onto its class channel, merging by per-cell max.
pub fn render_gt_heatmap(
    boxes: &[GtBox],
    geom: &FeatureGeometry,
    classes: usize,
    rule: &GaussianRule,
) -> Result<RenderedHeatmap> {
    geom.grid.validate()?;
    if geom.stride == 0 || geom.height() == 0 || geom.width() == 0 {
        return Err(Error::InvalidShape("feature geometry is empty".into()));
    }
    let (h, w) = (geom.height(), geom.width());
    let mut map = FeatureMap::zeros(classes, h, w)?.with_geometry(geom.stride, geom.cell())?;
    let mut skipped = 0;
    for b in boxes {
        let k = b.class_id as usize;
        let Some((ci, cj)) = geom.cell_of(b.cx, b.cy).filter(|_| k < classes) else {
            skipped += 1;
            continue;
        };
        let sigma = rule.sigma_cells(b, geom.cell());
        let r = rule.radius(sigma);
        let denom = 2.0 * sigma * sigma;
        let plane = map.channel_mut(k);
        for i in ci.saturating_sub(r)..(ci + r + 1).min(h) {
            for j in cj.saturating_sub(r)..(cj + r + 1).min(w) {
                let di = i as f64 - ci as f64;
                let dj = j as f64 - cj as f64;
                let v = (-(di * di + dj * dj) / denom).exp();
                let cell = &mut plane[i * w + j];
                *cell = cell.max(v);
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} boxes outside the heatmap were skipped");
    }
    Ok(RenderedHeatmap {
        heatmap: Heatmap(map),
        skipped,
    })
}
