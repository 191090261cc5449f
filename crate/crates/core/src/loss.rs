//! Detection focal loss and the weighted total objective.

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::nn::logistic;
use crate::tensor::{FeatureMap, GradPair};

pub const DEFAULT_GAMMA: f64 = 5.0;
pub const DEFAULT_DELTA: f64 = 25.0;

const FOCAL_ALPHA: i32 = 2;
const FOCAL_BETA: i32 = 4;

/// Number of cells with a ground-truth value of exactly 1, floored at 1.
pub fn center_count(gt: &Heatmap) -> usize {
    gt.values().iter().filter(|v| **v == 1.0).count().max(1)
}

/// Per-cell focal term and its derivative w.r.t. the logit, given `p = sigmoid(logit)`.
fn focal_cell(p: f64, g: f64) -> (f64, f64) {
    let q = 1.0 - p;
    if g == 1.0 {
        let l = -q.powi(FOCAL_ALPHA) * p.ln();
        let d = q * q * (2.0 * p * p.ln() - q);
        (l, d)
    } else {
        let wneg = (1.0 - g).powi(FOCAL_BETA);
        let l = -wneg * p.powi(FOCAL_ALPHA) * q.ln();
        let d = wneg * p * p * (p - 2.0 * q * q.ln());
        (l, d)
    }
}

/// Penalty-reduced focal loss with exponents (2, 4), normalized by the center count.
///
/// `pred` holds probabilities strictly inside (0, 1); the gradient is returned
/// w.r.t. the logits that produced them.
pub fn det_loss(pred: &Heatmap, gt: &Heatmap) -> Result<GradPair> {
    pred.map().ensure_same_shape(gt.map(), "det_loss")?;
    if let Some(v) = pred.values().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::Domain(format!("predicted probability {v} outside (0, 1)")));
    }
    let n = center_count(gt) as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| {
            let (l, d) = focal_cell(p, g);
            loss += l;
            d / n
        })
        .collect();
    Ok(GradPair {
        value: loss / n,
        grad: pred.map().with_values(grad)?,
    })
}

/// [`det_loss`] evaluated on logits, with probabilities clamped like the head output.
pub fn det_loss_logits(logits: &FeatureMap, gt: &Heatmap) -> Result<GradPair> {
    logits.ensure_same_shape(gt.map(), "det_loss_logits")?;
    if !logits.all_finite() {
        return Err(Error::NumericInstability("non-finite detection logits".into()));
    }
    det_loss(&Heatmap::new(logistic(logits))?, gt)
}

pub fn total_loss(l_det: f64, l_afd: f64, l_pfd: f64, gamma: f64, delta: f64) -> f64 {
    l_det + gamma * l_afd + delta * l_pfd
}
