//! The differentiable-operation contract and its finite-difference checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// An operation with a hand-written vector-Jacobian product.
///
/// `backward` receives the same inputs given to `forward` together with the
/// gradient of some scalar with respect to the output, and returns one
/// gradient per input, each shaped like that input.
pub trait DiffOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap>;
    fn backward(&self, inputs: &[FeatureMap], upstream: &FeatureMap) -> Result<Vec<FeatureMap>>;
}

/// Reduces a tensor-valued op to a scalar through a fixed random linear functional.
pub struct LinearProbe<O> {
    op: O,
    seed: u64,
    name: String,
}

impl<O: DiffOp> LinearProbe<O> {
    pub fn new(op: O, seed: u64) -> Self {
        let name = op.name().to_string();
        Self { op, seed, name }
    }

    fn weights(&self, like: &FeatureMap) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let values = (0..like.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        like.with_values(values).expect("same length")
    }
}

impl<O: DiffOp> DiffOp for LinearProbe<O> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        let out = self.op.forward(inputs)?;
        let w = self.weights(&out);
        Ok(FeatureMap::scalar(out.dot(&w)?))
    }

    fn backward(&self, inputs: &[FeatureMap], upstream: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let out = self.op.forward(inputs)?;
        let w = self.weights(&out).scaled(scalar_of(upstream)?);
        self.op.backward(inputs, &w)
    }
}

fn scalar_of(m: &FeatureMap) -> Result<f64> {
    if m.len() != 1 {
        return Err(Error::Precondition(format!(
            "expected a scalar, got a {:?} map",
            m.shape()
        )));
    }
    Ok(m.values()[0])
}

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// When set, at most this many coordinates per input are probed, drawn
    /// without replacement from `seed`. `None` probes every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Optional per-input mask; `false` entries are excluded from comparison.
    pub masks: Option<Vec<Vec<bool>>>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-5,
            max_coords_per_input: None,
            seed: 0,
            masks: None,
        }
    }
}

/// Worst disagreement observed by a gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference check of `op`'s backward against its forward.
///
/// `op.forward` must return a scalar (wrap tensor ops in [`LinearProbe`]).
pub fn finite_diff_check(
    op: &dyn DiffOp,
    inputs: &[FeatureMap],
    opts: &CheckOptions,
) -> Result<CheckReport> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::Precondition("epsilon must be positive".into()));
    }
    eval_scalar(op, inputs)?;
    let analytic = op.backward(inputs, &FeatureMap::scalar(1.0))?;
    if analytic.len() != inputs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}: backward returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }
    for (g, x) in analytic.iter().zip(inputs) {
        if g.len() != x.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}: gradient of {} values for input of {}",
                op.name(),
                g.len(),
                x.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<FeatureMap> = inputs.to_vec();
    let mut max_rel = 0.0_f64;
    let mut worst = None;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.len())
            .filter(|&idx| {
                opts.masks
                    .as_ref()
                    .and_then(|m| m.get(k))
                    .is_none_or(|m| m[idx])
            })
            .collect();
        if let Some(limit) = opts.max_coords_per_input {
            // partial Fisher-Yates
            let take = limit.min(coords.len());
            for t in 0..take {
                let s = rng.random_range(t..coords.len());
                coords.swap(t, s);
            }
            coords.truncate(take);
        }
        for idx in coords {
            let orig = input.values()[idx];
            work[k].values_mut()[idx] = orig + opts.epsilon;
            let plus = eval_scalar(op, &work)?;
            work[k].values_mut()[idx] = orig - opts.epsilon;
            let minus = eval_scalar(op, &work)?;
            work[k].values_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[k].values()[idx];
            let rel = relative_error(a, numeric);
            checked += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((k, idx, a, numeric));
            }
        }
    }
    Ok(CheckReport {
        op: op.name().to_string(),
        max_rel_error: max_rel,
        coords_checked: checked,
        worst,
        passed: max_rel <= opts.tolerance,
    })
}

fn eval_scalar(op: &dyn DiffOp, inputs: &[FeatureMap]) -> Result<f64> {
    let out = op.forward(inputs)?;
    let v = scalar_of(&out)?;
    if !v.is_finite() {
        return Err(Error::NumericInstability(format!(
            "{} produced non-finite value {v}",
            op.name()
        )));
    }
    Ok(v)
}
