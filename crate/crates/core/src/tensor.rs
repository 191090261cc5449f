//! Dense channel-major feature grids.
//!
//! Every BEV feature in the pipeline, from the pillar map through the
//! high-level encoder outputs, is a [`FeatureMap`]. Values are stored in
//! `(c, i, j)` order with `j` fastest. Stride and cell size are carried
//! along so that each stage can check that its realized resolution matches
//! the one it declares.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    meters_per_cell: f64,
    values: Vec<f64>,
}

impl FeatureMap {
    /// A `channels x height x width` map with every cell set to `fill`, stride 1.
    pub fn new(channels: usize, height: usize, width: usize, fill: f64) -> Result<Self> {
        Self::from_vec(channels, height, width, vec![fill; channels * height * width])
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, 0.0)
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::InvalidShape(format!(
                "{} values for a {channels}x{height}x{width} map",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride: 1,
            meters_per_cell: 1.0,
            values,
        })
    }

    /// A `1 x 1 x n` map wrapping a flat array, used to treat parameters as inputs.
    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::from_vec(1, 1, n, values)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, 1, vec![value]).expect("1x1x1 is a valid shape")
    }

    pub fn random_uniform<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = channels * height * width;
        let values = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_vec(channels, height, width, values)
    }

    /// Zero map with the same shape and geometry as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            ..self.clone()
        }
    }

    /// Same geometry, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::InvalidShape(format!(
                "{} values for a map of {} cells",
                values.len(),
                self.values.len()
            )));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    pub fn with_geometry(mut self, stride: usize, meters_per_cell: f64) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidShape("stride must be at least 1".into()));
        }
        if !(meters_per_cell > 0.0) {
            return Err(Error::InvalidShape(format!(
                "meters_per_cell must be positive, got {meters_per_cell}"
            )));
        }
        self.stride = stride;
        self.meters_per_cell = meters_per_cell;
        Ok(self)
    }

    pub(crate) fn set_geometry_unchecked(&mut self, stride: usize, meters_per_cell: f64) {
        self.stride = stride;
        self.meters_per_cell = meters_per_cell;
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn meters_per_cell(&self) -> f64 {
        self.meters_per_cell
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The values of channel `c` as a contiguous `height * width` slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.cells();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.cells();
        &mut self.values[c * n..(c + 1) * n]
    }

    fn offset(&self, c: usize, i: usize, j: usize) -> Result<usize> {
        if c >= self.channels || i >= self.height || j >= self.width {
            return Err(Error::IndexOutOfRange {
                c,
                i,
                j,
                channels: self.channels,
                height: self.height,
                width: self.width,
            });
        }
        Ok((c * self.height + i) * self.width + j)
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> Result<f64> {
        Ok(self.values[self.offset(c, i, j)?])
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, value: f64) -> Result<()> {
        let k = self.offset(c, i, j)?;
        self.values[k] = value;
        Ok(())
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_same_shape(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Sum over channels at cell `(i, j)`.
    pub fn channel_sum_at(&self, i: usize, j: usize) -> f64 {
        let n = self.cells();
        let k = i * self.width + j;
        (0..self.channels).map(|c| self.values[c * n + k]).sum()
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &FeatureMap, scale: f64) -> Result<()> {
        self.ensure_same_shape(other, "add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> FeatureMap {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= scale);
        out
    }

    pub fn dot(&self, other: &FeatureMap) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Fraction of cells whose channel sum is strictly positive.
    pub fn active_ratio(&self) -> f64 {
        let active = (0..self.height)
            .flat_map(|i| (0..self.width).map(move |j| (i, j)))
            .filter(|&(i, j)| self.channel_sum_at(i, j) > 0.0)
            .count();
        active as f64 / self.cells() as f64
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
            && self.stride == other.stride
            && self.meters_per_cell.to_bits() == other.meters_per_cell.to_bits()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A scalar value paired with its gradient with respect to one input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub value: f64,
    pub grad: FeatureMap,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fill_single_cell() {
        let m = FeatureMap::new(1, 1, 1, 0.0).unwrap();
        assert_eq!(m.values(), &[0.0]);
        assert_eq!(m.stride(), 1);
    }

    #[test]
    fn constant_fill() {
        let m = FeatureMap::new(2, 2, 2, 1.5).unwrap();
        assert_eq!(m.len(), 8);
        assert!(m.values().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn write_then_read_back() {
        let mut m = FeatureMap::new(3, 4, 5, 0.0).unwrap();
        m.set(2, 3, 4, 7.25).unwrap();
        assert_eq!(m.get(2, 3, 4).unwrap(), 7.25);
        assert_eq!(*m.values().last().unwrap(), 7.25);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(FeatureMap::new(0, 2, 2, 0.0), Err(Error::InvalidShape(_))));
        assert!(matches!(FeatureMap::new(2, 0, 2, 0.0), Err(Error::InvalidShape(_))));
        assert!(matches!(FeatureMap::new(2, 2, 0, 0.0), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn out_of_range_is_an_error() {
        let m = FeatureMap::new(2, 3, 4, 0.0).unwrap();
        assert!(matches!(m.get(2, 0, 0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(m.get(0, 3, 0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(m.get(0, 0, 4), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn channel_major_layout() {
        let m = FeatureMap::from_vec(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(m.get(1, 0, 1).unwrap(), 5.0);
        assert_eq!(m.channel(1), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn geometry_validation() {
        let m = FeatureMap::zeros(1, 2, 2).unwrap();
        assert!(m.clone().with_geometry(0, 1.0).is_err());
        assert!(m.clone().with_geometry(1, 0.0).is_err());
        let g = m.with_geometry(8, 3.6).unwrap();
        assert_eq!((g.stride(), g.meters_per_cell()), (8, 3.6));
    }
}
