//! Activation-based feature distillation on low-level BEV maps.
//!
//! A cell is *active* when its channel sum is positive. Cells active in both
//! radar and LiDAR form the AR set; radar-only cells form IR. AR cells are
//! weighted by `alpha`, IR cells by `rho * beta` with `rho = N_AR / N_IR`, and
//! the loss is the weighted squared difference summed over channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, GradPair};

pub const DEFAULT_ALPHA: f64 = 3e-4;
pub const DEFAULT_BETA: f64 = 5e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl ActiveMask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "{} mask bits for a {height}x{width} grid",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }
}

/// Per-cell `sum_c F[c, i, j] > 0`. The map must be non-negative.
pub fn active_mask(f: &FeatureMap) -> Result<ActiveMask> {
    if let Some(v) = f.values().iter().find(|v| **v < 0.0 || v.is_nan()) {
        return Err(Error::Precondition(format!(
            "active mask needs a rectified map, found {v}"
        )));
    }
    let bits = (0..f.height())
        .flat_map(|i| (0..f.width()).map(move |j| (i, j)))
        .map(|(i, j)| f.channel_sum_at(i, j) > 0.0)
        .collect();
    ActiveMask::from_bits(f.height(), f.width(), bits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRegionPartition {
    pub height: usize,
    pub width: usize,
    pub ar: Vec<bool>,
    pub ir: Vec<bool>,
    pub n_ar: usize,
    pub n_ir: usize,
    pub rho: f64,
}

pub fn partition_low(radar: &ActiveMask, lidar: &ActiveMask) -> Result<LowRegionPartition> {
    if (radar.height, radar.width) != (lidar.height, lidar.width) {
        return Err(Error::ShapeMismatch(format!(
            "radar mask {}x{} vs lidar mask {}x{}",
            radar.height, radar.width, lidar.height, lidar.width
        )));
    }
    let ar: Vec<bool> = radar.bits.iter().zip(&lidar.bits).map(|(r, l)| *r && *l).collect();
    let ir: Vec<bool> = radar.bits.iter().zip(&lidar.bits).map(|(r, l)| *r && !*l).collect();
    let n_ar = ar.iter().filter(|b| **b).count();
    let n_ir = ir.iter().filter(|b| **b).count();
    let rho = if n_ir > 0 {
        n_ar as f64 / n_ir as f64
    } else {
        0.0
    };
    Ok(LowRegionPartition {
        height: radar.height,
        width: radar.width,
        ar,
        ir,
        n_ar,
        n_ir,
        rho,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AfdWeights {
    pub alpha: f64,
    pub beta: f64,
    pub height: usize,
    pub width: usize,
    pub grid: Vec<f64>,
}

impl AfdWeights {
    pub fn total(&self) -> f64 {
        self.grid.iter().sum()
    }
}

pub fn afd_weights(p: &LowRegionPartition, alpha: f64, beta: f64) -> Result<AfdWeights> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Precondition("alpha and beta must be non-negative".into()));
    }
    let ir_weight = p.rho * beta;
    let grid = p
        .ar
        .iter()
        .zip(&p.ir)
        .map(|(&a, &i)| {
            if a {
                alpha
            } else if i {
                ir_weight
            } else {
                0.0
            }
        })
        .collect();
    Ok(AfdWeights {
        alpha,
        beta,
        height: p.height,
        width: p.width,
        grid,
    })
}

/// Optional rescaling of the summed loss. `None` follows the plain weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AfdNormalization {
    #[default]
    None,
    /// Divide by `channels * (number of weighted cells)`, floored at 1.
    PerElement,
}

pub fn afd_loss(f_lidar: &FeatureMap, f_radar: &FeatureMap, w: &AfdWeights) -> Result<GradPair> {
    afd_loss_with(f_lidar, f_radar, w, AfdNormalization::None)
}

/// `sum_c sum_ij W_ij (F_ldr - F_rdr)^2` and its gradient w.r.t. the radar map.
pub fn afd_loss_with(
    f_lidar: &FeatureMap,
    f_radar: &FeatureMap,
    w: &AfdWeights,
    norm: AfdNormalization,
) -> Result<GradPair> {
    f_lidar.ensure_same_shape(f_radar, "afd_loss")?;
    if (w.height, w.width) != (f_radar.height(), f_radar.width()) {
        return Err(Error::ShapeMismatch(format!(
            "weights {}x{} for a {}x{} map",
            w.height,
            w.width,
            f_radar.height(),
            f_radar.width()
        )));
    }
    let scale = match norm {
        AfdNormalization::None => 1.0,
        AfdNormalization::PerElement => {
            let weighted = w.grid.iter().filter(|v| **v != 0.0).count();
            1.0 / ((f_radar.channels() * weighted).max(1) as f64)
        }
    };
    let mut grad = f_radar.zeros_like();
    let mut loss = 0.0;
    for c in 0..f_radar.channels() {
        let (l, r) = (f_lidar.channel(c), f_radar.channel(c));
        let g = grad.channel_mut(c);
        for k in 0..w.grid.len() {
            let wk = w.grid[k];
            if wk == 0.0 {
                continue;
            }
            let d = l[k] - r[k];
            loss += wk * d * d;
            g[k] = -2.0 * wk * d * scale;
        }
    }
    Ok(GradPair {
        value: loss * scale,
        grad,
    })
}

/// One AFD level: the partition and weights used, and the loss with its gradient.
#[derive(Debug, Clone)]
pub struct AfdTerm {
    pub partition: LowRegionPartition,
    pub weights: AfdWeights,
    pub loss: GradPair,
}

#[derive(Debug, Clone)]
pub struct AfdTotal {
    pub value: f64,
    pub grad_l1: FeatureMap,
    pub grad_l2: FeatureMap,
    pub terms: [AfdTerm; 2],
}

/// Mean of the two per-level losses, each with its own radar mask against the shared LiDAR mask.
pub fn afd_total(
    f_lidar: &FeatureMap,
    f_r1: &FeatureMap,
    f_r2: &FeatureMap,
    alpha: f64,
    beta: f64,
) -> Result<AfdTotal> {
    afd_total_with(f_lidar, f_r1, f_r2, alpha, beta, AfdNormalization::None)
}

pub fn afd_total_with(
    f_lidar: &FeatureMap,
    f_r1: &FeatureMap,
    f_r2: &FeatureMap,
    alpha: f64,
    beta: f64,
    norm: AfdNormalization,
) -> Result<AfdTotal> {
    f_lidar.ensure_same_shape(f_r1, "afd_total level 1")?;
    f_lidar.ensure_same_shape(f_r2, "afd_total level 2")?;
    let lidar_mask = active_mask(f_lidar)?;
    let term = |f_r: &FeatureMap| -> Result<AfdTerm> {
        let partition = partition_low(&active_mask(f_r)?, &lidar_mask)?;
        let weights = afd_weights(&partition, alpha, beta)?;
        let loss = afd_loss_with(f_lidar, f_r, &weights, norm)?;
        Ok(AfdTerm {
            partition,
            weights,
            loss,
        })
    };
    let t1 = term(f_r1)?;
    let t2 = term(f_r2)?;
    Ok(AfdTotal {
        value: 0.5 * (t1.loss.value + t2.loss.value),
        grad_l1: t1.loss.grad.scaled(0.5),
        grad_l2: t2.loss.grad.scaled(0.5),
        terms: [t1, t2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> ActiveMask {
        let mut bits = vec![false; h * w];
        for &(i, j) in on {
            bits[i * w + j] = true;
        }
        ActiveMask::from_bits(h, w, bits).unwrap()
    }

    #[test]
    fn active_mask_definition() {
        let f = FeatureMap::from_vec(2, 1, 2, vec![0.5, 0.0, 0.5, 0.0]).unwrap();
        let m = active_mask(&f).unwrap();
        assert_eq!(m.bits, vec![true, false]);
        assert_eq!(active_mask(&FeatureMap::zeros(3, 4, 4).unwrap()).unwrap().count(), 0);
    }

    #[test]
    fn active_mask_rejects_negative() {
        let f = FeatureMap::from_vec(2, 1, 1, vec![1.0, -0.5]).unwrap();
        assert!(matches!(active_mask(&f), Err(Error::Precondition(_))));
    }

    #[test]
    fn all_active_gives_empty_ir() {
        let all: Vec<_> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
        let p = partition_low(&mask(4, 4, &all), &mask(4, 4, &all)).unwrap();
        assert_eq!((p.n_ar, p.n_ir, p.rho), (16, 0, 0.0));
    }

    #[test]
    fn two_cell_partition() {
        let p = partition_low(&mask(2, 2, &[(0, 0), (0, 1)]), &mask(2, 2, &[(0, 0)])).unwrap();
        assert_eq!(p.ar, vec![true, false, false, false]);
        assert_eq!(p.ir, vec![false, true, false, false]);
        assert_eq!(p.rho, 1.0);
    }

    #[test]
    fn partition_dimension_mismatch() {
        assert!(matches!(
            partition_low(&mask(2, 2, &[]), &mask(2, 3, &[])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn weights_substitution() {
        // n_ar = 2, n_ir = 4
        let radar = mask(2, 3, &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
        let lidar = mask(2, 3, &[(0, 0), (0, 1)]);
        let p = partition_low(&radar, &lidar).unwrap();
        assert_eq!((p.n_ar, p.n_ir), (2, 4));
        let w = afd_weights(&p, DEFAULT_ALPHA, DEFAULT_BETA).unwrap();
        assert_eq!(w.grid[0], 3e-4);
        assert_eq!(w.grid[3], 0.5 * 5e-5);
        assert!((w.grid[3] - 2.5e-5).abs() < 1e-20);
    }

    #[test]
    fn weights_without_ir() {
        let p = partition_low(&mask(1, 2, &[(0, 0)]), &mask(1, 2, &[(0, 0)])).unwrap();
        let w = afd_weights(&p, 3e-4, 5e-5).unwrap();
        assert_eq!(w.grid, vec![3e-4, 0.0]);
    }

    #[test]
    fn identical_features_give_zero() {
        let f = FeatureMap::from_vec(2, 2, 2, vec![1.0, 0.0, 2.0, 0.5, 1.0, 0.0, 0.0, 3.0]).unwrap();
        let t = afd_total(&f, &f, &f, 3e-4, 5e-5).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.grad_l1.values().iter().chain(t.grad_l2.values()).all(|v| *v == 0.0));
    }

    #[test]
    fn single_term() {
        let lidar = FeatureMap::new(1, 1, 1, 2.0).unwrap();
        let radar = FeatureMap::new(1, 1, 1, 1.0).unwrap();
        let p = partition_low(&active_mask(&radar).unwrap(), &active_mask(&lidar).unwrap()).unwrap();
        let w = afd_weights(&p, 3e-4, 5e-5).unwrap();
        let l = afd_loss(&lidar, &radar, &w).unwrap();
        assert_eq!(l.value, 3e-4);
        assert_eq!(l.grad.values(), &[-2.0 * 3e-4]);
    }

    #[test]
    fn per_element_normalization() {
        let lidar = FeatureMap::new(2, 1, 2, 2.0).unwrap();
        let radar = FeatureMap::new(2, 1, 2, 1.0).unwrap();
        let w = AfdWeights {
            alpha: 1.0,
            beta: 0.0,
            height: 1,
            width: 2,
            grid: vec![1.0, 0.0],
        };
        let plain = afd_loss(&lidar, &radar, &w).unwrap();
        let norm = afd_loss_with(&lidar, &radar, &w, AfdNormalization::PerElement).unwrap();
        assert_eq!(plain.value, 2.0);
        assert_eq!(norm.value, 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = FeatureMap::zeros(2, 2, 2).unwrap();
        let b = FeatureMap::zeros(3, 2, 2).unwrap();
        let w = AfdWeights {
            alpha: 0.0,
            beta: 0.0,
            height: 2,
            width: 2,
            grid: vec![0.0; 4],
        };
        assert!(afd_loss(&a, &b, &w).is_err());
        assert!(afd_total(&a, &a, &b, 1.0, 1.0).is_err());
    }
}
