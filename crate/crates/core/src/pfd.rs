//! Proposal-based feature distillation on high-level BEV maps.
//!
//! Ground-truth and predicted heatmaps are thresholded at `sigma` into TP, FP
//! and FN cells. Object cells (TP and FN) share `lambda1` and FP cells share
//! `lambda2`. Features are softmax-normalized across channels per cell and
//! compared with a weighted L1 distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::tensor::{FeatureMap, GradPair};

pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_LAMBDA1: f64 = 5.0;
pub const DEFAULT_LAMBDA2: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighRegionPartition {
    pub height: usize,
    pub width: usize,
    pub tp: Vec<bool>,
    pub fp: Vec<bool>,
    #[serde(rename = "fn")]
    pub fn_: Vec<bool>,
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    pub sigma: f64,
}

/// Per class: TP = GT>s & pred>s, FP = GT<s & pred>s, FN = GT>s & pred<s.
///
/// Classes are merged per cell with precedence TP, then FN, then FP, which keeps
/// the three sets disjoint. Values exactly equal to `sigma` fall in no region.
pub fn partition_high(gt: &Heatmap, pred: &Heatmap, sigma: f64) -> Result<HighRegionPartition> {
    if gt.map().shape() != pred.map().shape() {
        return Err(Error::ShapeMismatch(format!(
            "GT heatmap {:?} vs predicted {:?}",
            gt.map().shape(),
            pred.map().shape()
        )));
    }
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Precondition(format!("sigma must lie in (0, 1), got {sigma}")));
    }
    let (h, w) = (gt.height(), gt.width());
    let n = h * w;
    let (mut tp, mut fp, mut fn_) = (vec![false; n], vec![false; n], vec![false; n]);
    for k in 0..gt.classes() {
        let g = gt.map().channel(k);
        let p = pred.map().channel(k);
        for idx in 0..n {
            let (gv, pv) = (g[idx], p[idx]);
            tp[idx] |= gv > sigma && pv > sigma;
            fn_[idx] |= gv > sigma && pv < sigma;
            fp[idx] |= gv < sigma && pv > sigma;
        }
    }
    for idx in 0..n {
        if tp[idx] {
            fn_[idx] = false;
        }
        if tp[idx] || fn_[idx] {
            fp[idx] = false;
        }
    }
    let count = |v: &[bool]| v.iter().filter(|b| **b).count();
    Ok(HighRegionPartition {
        n_tp: count(&tp),
        n_fp: count(&fp),
        n_fn: count(&fn_),
        height: h,
        width: w,
        tp,
        fp,
        fn_,
        sigma,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub height: usize,
    pub width: usize,
    pub grid: Vec<f64>,
}

pub fn proposal_weights(p: &HighRegionPartition, lambda1: f64, lambda2: f64) -> Result<ProposalWeights> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::Precondition("lambda1 and lambda2 must be non-negative".into()));
    }
    let n_obj = p.n_tp + p.n_fn;
    let obj_w = if n_obj > 0 { lambda1 / n_obj as f64 } else { 0.0 };
    let fp_w = if p.n_fp > 0 { lambda2 / p.n_fp as f64 } else { 0.0 };
    let grid = (0..p.tp.len())
        .map(|k| {
            if p.tp[k] || p.fn_[k] {
                obj_w
            } else if p.fp[k] {
                fp_w
            } else {
                0.0
            }
        })
        .collect();
    Ok(ProposalWeights {
        lambda1,
        lambda2,
        height: p.height,
        width: p.width,
        grid,
    })
}

/// Per-cell channel distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFeatures(pub FeatureMap);

impl NormalizedFeatures {
    pub fn map(&self) -> &FeatureMap {
        &self.0
    }
}

/// `exp(F_c) / sum_k exp(F_k)` at every cell, with max subtraction.
pub fn channel_softmax(f: &FeatureMap) -> Result<NormalizedFeatures> {
    if !f.all_finite() {
        return Err(Error::NumericInstability("channel softmax of non-finite input".into()));
    }
    let (c, n) = (f.channels(), f.cells());
    let src = f.values();
    let mut out = f.zeros_like();
    let dst = out.values_mut();
    for k in 0..n {
        let m = (0..c).map(|ch| src[ch * n + k]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for ch in 0..c {
            let e = (src[ch * n + k] - m).exp();
            dst[ch * n + k] = e;
            z += e;
        }
        for ch in 0..c {
            dst[ch * n + k] /= z;
        }
    }
    Ok(NormalizedFeatures(out))
}

/// VJP of the channel softmax: `S_c (g_c - sum_k g_k S_k)`.
pub fn channel_softmax_backward(s: &NormalizedFeatures, upstream: &FeatureMap) -> Result<FeatureMap> {
    let s = &s.0;
    s.ensure_same_shape(upstream, "softmax backward")?;
    let (c, n) = (s.channels(), s.cells());
    let (sv, gv) = (s.values(), upstream.values());
    let mut out = upstream.zeros_like();
    let dst = out.values_mut();
    for k in 0..n {
        let dotp: f64 = (0..c).map(|ch| sv[ch * n + k] * gv[ch * n + k]).sum();
        for ch in 0..c {
            dst[ch * n + k] = sv[ch * n + k] * (gv[ch * n + k] - dotp);
        }
    }
    Ok(out)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sum_c sum_ij W_ij |S_ldr - S_rdr|` with gradient w.r.t. the radar features.
pub fn pfd_loss(
    f_lidar: &FeatureMap,
    f_radar: &FeatureMap,
    w: &ProposalWeights,
) -> Result<GradPair> {
    f_lidar.ensure_same_shape(f_radar, "pfd_loss")?;
    if (w.height, w.width) != (f_radar.height(), f_radar.width()) {
        return Err(Error::ShapeMismatch(format!(
            "proposal weights {}x{} for a {}x{} map",
            w.height,
            w.width,
            f_radar.height(),
            f_radar.width()
        )));
    }
    let s_l = channel_softmax(f_lidar)?;
    let s_r = channel_softmax(f_radar)?;
    let n = f_radar.cells();
    let mut loss = 0.0;
    let mut g_s = f_radar.zeros_like();
    {
        let (lv, rv) = (s_l.0.values(), s_r.0.values());
        let gs = g_s.values_mut();
        for ch in 0..f_radar.channels() {
            for k in 0..n {
                let wk = w.grid[k];
                if wk == 0.0 {
                    continue;
                }
                let d = lv[ch * n + k] - rv[ch * n + k];
                loss += wk * d.abs();
                // d|a - b| / db = -sign(a - b)
                gs[ch * n + k] = -wk * sign(d);
            }
        }
    }
    let grad = channel_softmax_backward(&s_r, &g_s)?;
    Ok(GradPair { value: loss, grad })
}

#[derive(Debug, Clone)]
pub struct PfdTotal {
    pub value: f64,
    pub grad_h1: FeatureMap,
    pub grad_h2: FeatureMap,
    pub levels: [f64; 2],
}

/// Mean of the two level losses under one shared weight grid.
pub fn pfd_total(
    teacher: (&FeatureMap, &FeatureMap),
    student: (&FeatureMap, &FeatureMap),
    w: &ProposalWeights,
) -> Result<PfdTotal> {
    let l1 = pfd_loss(teacher.0, student.0, w)?;
    let l2 = pfd_loss(teacher.1, student.1, w)?;
    Ok(PfdTotal {
        value: 0.5 * (l1.value + l2.value),
        grad_h1: l1.grad.scaled(0.5),
        grad_h2: l2.grad.scaled(0.5),
        levels: [l1.value, l2.value],
    })
}
