//! Registered differentiable operations and the finite-difference suite over them.
//!
//! Network assemblies take their flattened parameter store as a second input,
//! so a single check covers gradients w.r.t. both features and parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afd::{afd_loss, AfdWeights};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, CheckOptions, CheckReport, DiffOp, LinearProbe};
use crate::heatmap::Heatmap;
use crate::loss::det_loss_logits;
use crate::nn::assembly::logistic_backward;
use crate::nn::conv::{conv2d_backward, conv2d_forward, tconv2d_backward, tconv2d_forward};
use crate::nn::ops::{aggregate_backward, concat_backward, rectify_backward};
use crate::nn::{
    aggregate, concat, logistic, rectify, CenterHead, Cma, ConvGeom, ConvParams, DenseEnc,
    NetConfig, Param, ParamStore, SparseEnc,
};
use crate::pfd::{channel_softmax, channel_softmax_backward, pfd_loss, ProposalWeights};
use crate::tensor::FeatureMap;

/// Names of every registered operation, in suite order.
pub const REGISTERED_OPS: [&str; 12] = [
    "conv2d",
    "tconv2d",
    "rectify",
    "aggregate",
    "sparse_enc",
    "cma",
    "dense_enc",
    "center_head",
    "channel_softmax",
    "afd_loss",
    "pfd_loss",
    "det_loss",
];

fn input(inputs: &[FeatureMap], k: usize) -> Result<&FeatureMap> {
    inputs
        .get(k)
        .ok_or_else(|| Error::Precondition(format!("missing input {k}")))
}

fn flatten(store: &ParamStore) -> FeatureMap {
    let values: Vec<f64> = store.iter().flat_map(|(_, p)| p.data.iter().copied()).collect();
    FeatureMap::from_flat(values).expect("non-empty parameter store")
}

fn unflatten(template: &ParamStore, flat: &FeatureMap) -> Result<ParamStore> {
    if flat.len() != template.numel() {
        return Err(Error::ShapeMismatch(format!(
            "{} flat parameters for a store of {}",
            flat.len(),
            template.numel()
        )));
    }
    let mut out = ParamStore::new();
    let mut at = 0;
    for (name, p) in template.iter() {
        let n = p.data.len();
        out.insert(
            name.clone(),
            Param {
                shape: p.shape.clone(),
                data: flat.values()[at..at + n].to_vec(),
            },
        );
        at += n;
    }
    Ok(out)
}

fn split_channels(m: &FeatureMap, first: usize) -> Result<(FeatureMap, FeatureMap)> {
    concat_backward(m, first)
}

struct Conv2dOp(ConvGeom);

impl DiffOp for Conv2dOp {
    fn name(&self) -> &str {
        "conv2d"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        let (x, w, b) = (input(inputs, 0)?, input(inputs, 1)?, input(inputs, 2)?);
        conv2d_forward(x, w.values(), Some(b.values()), &self.0)
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let (x, w) = (input(inputs, 0)?, input(inputs, 1)?);
        let g = conv2d_backward(x, w.values(), &self.0, up)?;
        Ok(vec![g.input, FeatureMap::from_flat(g.weight)?, FeatureMap::from_flat(g.bias)?])
    }
}

struct Tconv2dOp(ConvGeom);

impl DiffOp for Tconv2dOp {
    fn name(&self) -> &str {
        "tconv2d"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        let (x, w, b) = (input(inputs, 0)?, input(inputs, 1)?, input(inputs, 2)?);
        tconv2d_forward(x, w.values(), Some(b.values()), &self.0)
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let (x, w) = (input(inputs, 0)?, input(inputs, 1)?);
        let g = tconv2d_backward(x, w.values(), &self.0, up)?;
        Ok(vec![g.input, FeatureMap::from_flat(g.weight)?, FeatureMap::from_flat(g.bias)?])
    }
}

struct RectifyOp;

impl DiffOp for RectifyOp {
    fn name(&self) -> &str {
        "rectify"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        Ok(rectify(input(inputs, 0)?))
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        Ok(vec![rectify_backward(input(inputs, 0)?, up)?])
    }
}

struct AggregateOp(ConvGeom);

impl DiffOp for AggregateOp {
    fn name(&self) -> &str {
        "aggregate"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        let params = ConvParams::new(
            self.0,
            input(inputs, 2)?.values().to_vec(),
            input(inputs, 3)?.values().to_vec(),
        )?;
        aggregate(&params, input(inputs, 0)?, input(inputs, 1)?)
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let params = ConvParams::new(
            self.0,
            input(inputs, 2)?.values().to_vec(),
            input(inputs, 3)?.values().to_vec(),
        )?;
        let g = aggregate_backward(&params, input(inputs, 0)?, input(inputs, 1)?, up)?;
        Ok(vec![g.a, g.b, FeatureMap::from_flat(g.weight)?, FeatureMap::from_flat(g.bias)?])
    }
}

struct SparseEncOp {
    enc: SparseEnc,
    template: ParamStore,
}

impl DiffOp for SparseEncOp {
    fn name(&self) -> &str {
        "sparse_enc"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        let p = unflatten(&self.template, input(inputs, 1)?)?;
        self.enc.infer(&p, input(inputs, 0)?)
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let p = unflatten(&self.template, input(inputs, 1)?)?;
        let (_, t) = self.enc.forward(&p, input(inputs, 0)?)?;
        let mut grads = p.zeros_like();
        let gx = self.enc.backward(&p, &t, up, &mut grads)?;
        Ok(vec![gx, flatten(&grads)])
    }
}

/// Both CMA outputs stacked along channels.
struct CmaOp {
    cma: Cma,
    template: ParamStore,
}

impl DiffOp for CmaOp {
    fn name(&self) -> &str {
        "cma"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        let p = unflatten(&self.template, input(inputs, 1)?)?;
        let ((l1, l2), _) = self.cma.forward(&p, input(inputs, 0)?)?;
        concat(&l1, &l2)
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let p = unflatten(&self.template, input(inputs, 1)?)?;
        let ((l1, _), t) = self.cma.forward(&p, input(inputs, 0)?)?;
        let (g1, g2) = split_channels(up, l1.channels())?;
        let mut grads = p.zeros_like();
        let gx = self.cma.backward(&p, &t, Some(&g1), &g2, &mut grads)?;
        Ok(vec![gx, flatten(&grads)])
    }
}

/// Both dense-encoder outputs stacked along channels.
struct DenseEncOp {
    enc: DenseEnc,
    template: ParamStore,
}

impl DiffOp for DenseEncOp {
    fn name(&self) -> &str {
        "dense_enc"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        let p = unflatten(&self.template, input(inputs, 1)?)?;
        let ((h1, h2), _) = self.enc.forward(&p, input(inputs, 0)?)?;
        concat(&h1, &h2)
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let p = unflatten(&self.template, input(inputs, 1)?)?;
        let ((h1, _), t) = self.enc.forward(&p, input(inputs, 0)?)?;
        let (g1, g2) = split_channels(up, h1.channels())?;
        let mut grads = p.zeros_like();
        let gx = self.enc.backward(&p, &t, Some(&g1), &g2, &mut grads)?;
        Ok(vec![gx, flatten(&grads)])
    }
}

/// Head followed by the logistic, i.e. the heatmap itself.
struct CenterHeadOp {
    head: CenterHead,
    template: ParamStore,
}

impl DiffOp for CenterHeadOp {
    fn name(&self) -> &str {
        "center_head"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        let p = unflatten(&self.template, input(inputs, 1)?)?;
        let (logits, _) = self.head.forward(&p, input(inputs, 0)?)?;
        Ok(logistic(&logits))
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let p = unflatten(&self.template, input(inputs, 1)?)?;
        let (logits, t) = self.head.forward(&p, input(inputs, 0)?)?;
        let g_logits = logistic_backward(&logistic(&logits), up)?;
        let mut grads = p.zeros_like();
        let gx = self.head.backward(&p, &t, &g_logits, &mut grads)?;
        Ok(vec![gx, flatten(&grads)])
    }
}

struct SoftmaxOp;

impl DiffOp for SoftmaxOp {
    fn name(&self) -> &str {
        "channel_softmax"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        Ok(channel_softmax(input(inputs, 0)?)?.0)
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let s = channel_softmax(input(inputs, 0)?)?;
        Ok(vec![channel_softmax_backward(&s, up)?])
    }
}

/// Loss w.r.t. the radar features, with teacher features and weights held fixed.
struct AfdLossOp {
    lidar: FeatureMap,
    weights: AfdWeights,
}

impl DiffOp for AfdLossOp {
    fn name(&self) -> &str {
        "afd_loss"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        Ok(FeatureMap::scalar(afd_loss(&self.lidar, input(inputs, 0)?, &self.weights)?.value))
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let g = afd_loss(&self.lidar, input(inputs, 0)?, &self.weights)?;
        Ok(vec![g.grad.scaled(up.values()[0])])
    }
}

struct PfdLossOp {
    lidar: FeatureMap,
    weights: ProposalWeights,
}

impl DiffOp for PfdLossOp {
    fn name(&self) -> &str {
        "pfd_loss"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        Ok(FeatureMap::scalar(pfd_loss(&self.lidar, input(inputs, 0)?, &self.weights)?.value))
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let g = pfd_loss(&self.lidar, input(inputs, 0)?, &self.weights)?;
        Ok(vec![g.grad.scaled(up.values()[0])])
    }
}

/// Focal loss as a function of the head logits.
struct DetLossOp {
    gt: Heatmap,
}

impl DiffOp for DetLossOp {
    fn name(&self) -> &str {
        "det_loss"
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        Ok(FeatureMap::scalar(det_loss_logits(input(inputs, 0)?, &self.gt)?.value))
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let g = det_loss_logits(input(inputs, 0)?, &self.gt)?;
        Ok(vec![g.grad.scaled(up.values()[0])])
    }
}

/// One op instance with the inputs it is checked at.
pub struct GradCase {
    pub op: Box<dyn DiffOp>,
    pub inputs: Vec<FeatureMap>,
    /// Step override for ops that are at most quadratic in every coordinate,
    /// where central differences are exact and a wide step only reduces roundoff.
    pub epsilon: Option<f64>,
}

const EXACT_STEP: f64 = 1e-3;

/// Small widths keep the suite fast while exercising every code path.
pub fn check_net_config() -> NetConfig {
    NetConfig {
        pillar_channels: 2,
        sparse_widths: [2, 3],
        channels: 2,
        cma_widths: [3, 3],
        dense_width: 3,
        convblock_depth: 2,
        classes: 2,
    }
}

fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> FeatureMap {
    FeatureMap::random_uniform(c, h, w, lo, hi, rng).expect("non-empty map")
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> FeatureMap {
    FeatureMap::from_flat((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("non-empty vector")
}

/// Initialized parameters with every entry jittered so biases and shifts are nonzero.
fn jittered(init: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng), rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    init(&mut store, rng);
    for (_, p) in store.iter_mut() {
        for v in p.data.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    store
}

fn with_stride(m: FeatureMap, stride: usize) -> FeatureMap {
    m.with_geometry(stride, 0.45 * stride as f64).expect("valid geometry")
}

/// Builds the named case for one seed. Tensor-valued ops are wrapped in a [`LinearProbe`].
pub fn build_case(name: &str, seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x51);
    let cfg = check_net_config();
    let probe = |op: Box<dyn DiffOp>| -> Box<dyn DiffOp> { Box::new(LinearProbe::new(BoxedOp(op), seed)) };
    let case = match name {
        "conv2d" => {
            let g = ConvGeom::new(2, 3, 3, 2, 1);
            GradCase {
                epsilon: Some(EXACT_STEP),
                op: probe(Box::new(Conv2dOp(g))),
                inputs: vec![
                    rand_map(&mut rng, 2, 5, 6, -1.0, 1.0),
                    rand_vec(&mut rng, g.weight_len()),
                    rand_vec(&mut rng, 3),
                ],
            }
        }
        "tconv2d" => {
            let g = ConvGeom::new(3, 2, 2, 2, 0);
            GradCase {
                epsilon: Some(EXACT_STEP),
                op: probe(Box::new(Tconv2dOp(g))),
                inputs: vec![
                    with_stride(rand_map(&mut rng, 3, 3, 4, -1.0, 1.0), 2),
                    rand_vec(&mut rng, g.weight_len()),
                    rand_vec(&mut rng, 2),
                ],
            }
        }
        "rectify" => {
            // keep values away from the kink at zero
            let mut x = rand_map(&mut rng, 2, 4, 4, 0.05, 1.0);
            for v in x.values_mut() {
                if rng.random_bool(0.5) {
                    *v = -*v;
                }
            }
            GradCase {
                epsilon: Some(EXACT_STEP),
                op: probe(Box::new(RectifyOp)),
                inputs: vec![x],
            }
        }
        "aggregate" => {
            let g = ConvGeom::new(5, 3, 1, 1, 0);
            GradCase {
                epsilon: Some(EXACT_STEP),
                op: probe(Box::new(AggregateOp(g))),
                inputs: vec![
                    rand_map(&mut rng, 2, 4, 4, -1.0, 1.0),
                    rand_map(&mut rng, 3, 4, 4, -1.0, 1.0),
                    rand_vec(&mut rng, g.weight_len()),
                    rand_vec(&mut rng, 3),
                ],
            }
        }
        "sparse_enc" => {
            let enc = SparseEnc::new(&cfg, "sparse_enc");
            let p = jittered(|s, r| enc.init(s, r), &mut rng);
            let x = rand_map(&mut rng, cfg.pillar_channels, 16, 16, 0.0, 1.0);
            GradCase {
                epsilon: None,
                inputs: vec![x, flatten(&p)],
                op: probe(Box::new(SparseEncOp { enc, template: p })),
            }
        }
        "cma" => {
            let cma = Cma::new(&cfg, "cma");
            let p = jittered(|s, r| cma.init(s, r), &mut rng);
            let x = with_stride(rand_map(&mut rng, cfg.channels, 4, 4, 0.0, 1.0), 8);
            GradCase {
                epsilon: None,
                inputs: vec![x, flatten(&p)],
                op: probe(Box::new(CmaOp { cma, template: p })),
            }
        }
        "dense_enc" => {
            let enc = DenseEnc::new(&cfg, "dense_enc");
            let p = jittered(|s, r| enc.init(s, r), &mut rng);
            let x = with_stride(rand_map(&mut rng, cfg.channels, 4, 4, 0.0, 1.0), 8);
            GradCase {
                epsilon: None,
                inputs: vec![x, flatten(&p)],
                op: probe(Box::new(DenseEncOp { enc, template: p })),
            }
        }
        "center_head" => {
            let head = CenterHead::new(&cfg, "head");
            let p = jittered(|s, r| head.init(s, r), &mut rng);
            let x = with_stride(rand_map(&mut rng, cfg.channels, 4, 4, 0.0, 1.0), 8);
            GradCase {
                epsilon: None,
                inputs: vec![x, flatten(&p)],
                op: probe(Box::new(CenterHeadOp { head, template: p })),
            }
        }
        "channel_softmax" => GradCase {
            epsilon: None,
            op: probe(Box::new(SoftmaxOp)),
            inputs: vec![rand_map(&mut rng, 4, 3, 3, -2.0, 2.0)],
        },
        "afd_loss" => {
            let lidar = rand_map(&mut rng, 4, 8, 8, 0.0, 1.0);
            let grid = (0..64)
                .map(|_| [0.0, 3e-4, 2.5e-5][rng.random_range(0..3)])
                .collect();
            let weights = AfdWeights {
                alpha: 3e-4,
                beta: 5e-5,
                height: 8,
                width: 8,
                grid,
            };
            GradCase {
                epsilon: Some(EXACT_STEP),
                op: Box::new(AfdLossOp { lidar, weights }),
                inputs: vec![rand_map(&mut rng, 4, 8, 8, 0.0, 1.0)],
            }
        }
        "pfd_loss" => {
            let lidar = rand_map(&mut rng, 4, 4, 4, -2.0, 2.0);
            let grid = (0..16).map(|_| [0.0, 0.5, 0.25][rng.random_range(0..3)]).collect();
            let weights = ProposalWeights {
                lambda1: 5.0,
                lambda2: 1.0,
                height: 4,
                width: 4,
                grid,
            };
            GradCase {
                epsilon: None,
                op: Box::new(PfdLossOp { lidar, weights }),
                inputs: vec![rand_map(&mut rng, 4, 4, 4, -2.0, 2.0)],
            }
        }
        "det_loss" => {
            // bounded targets and logits keep every gradient well above roundoff
            let mut gt = rand_map(&mut rng, 2, 4, 4, 0.0, 0.7);
            for _ in 0..2 {
                let k = rng.random_range(0..gt.len());
                gt.values_mut()[k] = 1.0;
            }
            GradCase {
                epsilon: None,
                op: Box::new(DetLossOp {
                    gt: Heatmap::new(gt)?,
                }),
                inputs: vec![rand_map(&mut rng, 2, 4, 4, -2.0, 2.0)],
            }
        }
        other => return Err(Error::Config(format!("no registered op named {other:?}"))),
    };
    Ok(case)
}

struct BoxedOp(Box<dyn DiffOp>);

impl DiffOp for BoxedOp {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn forward(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        self.0.forward(inputs)
    }
    fn backward(&self, inputs: &[FeatureMap], up: &FeatureMap) -> Result<Vec<FeatureMap>> {
        self.0.backward(inputs, up)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seeds: u64,
    pub first_seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_coords_per_input: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 10,
            first_seed: 0,
            epsilon: 1e-5,
            tolerance: 1e-5,
            max_coords_per_input: 64,
        }
    }
}

/// Per-op result over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpSummary {
    pub op: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
    pub worst_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub ops: Vec<OpSummary>,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Checks `case` at every seed, building a fresh instance per seed.
pub fn check_op(
    name: &str,
    opts: &SuiteOptions,
    build: &dyn Fn(&str, u64) -> Result<GradCase>,
) -> Result<OpSummary> {
    let mut summary = OpSummary {
        op: name.to_string(),
        seeds: opts.seeds,
        max_rel_error: 0.0,
        coords_checked: 0,
        passed: true,
        worst_seed: opts.first_seed,
    };
    for seed in opts.first_seed..opts.first_seed + opts.seeds {
        let case = build(name, seed)?;
        let report: CheckReport = finite_diff_check(
            case.op.as_ref(),
            &case.inputs,
            &CheckOptions {
                epsilon: case.epsilon.unwrap_or(opts.epsilon),
                tolerance: opts.tolerance,
                max_coords_per_input: Some(opts.max_coords_per_input),
                seed,
                masks: None,
            },
        )?;
        summary.coords_checked += report.coords_checked;
        if report.max_rel_error > summary.max_rel_error {
            summary.max_rel_error = report.max_rel_error;
            summary.worst_seed = seed;
        }
        summary.passed &= report.passed;
    }
    Ok(summary)
}

/// Runs every op in `names` through [`check_op`].
pub fn run_suite_with(
    names: &[&str],
    opts: &SuiteOptions,
    build: &dyn Fn(&str, u64) -> Result<GradCase>,
) -> Result<SuiteReport> {
    let ops = names
        .iter()
        .map(|n| check_op(n, opts, build))
        .collect::<Result<Vec<_>>>()?;
    let failures: Vec<String> = ops.iter().filter(|o| !o.passed).map(|o| o.op.clone()).collect();
    Ok(SuiteReport {
        tolerance: opts.tolerance,
        passed: failures.is_empty(),
        ops,
        failures,
    })
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    run_suite_with(&REGISTERED_OPS, opts, &build_case)
}
