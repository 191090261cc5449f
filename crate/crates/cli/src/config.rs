//! Flat run configuration: JSON file, then `--key=value` overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use bevkd::afd::AfdNormalization;
use bevkd::heatmap::GaussianRule;
use bevkd::nn::NetConfig;
use bevkd::pillar::GridGeometry;
use bevkd::scene::default_classes;
use bevkd::{ModelSpec, SceneConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    /// Base seed: scene `k` uses `seed + k`, training uses `seed`.
    pub seed: u64,
    pub n_scenes: usize,

    pub range_x_min: f64,
    pub range_x_max: f64,
    pub range_y_min: f64,
    pub range_y_max: f64,
    pub meters_per_cell: f64,

    pub n_boxes: usize,
    pub lidar_points_per_box: usize,
    pub ground_points: usize,
    pub ground_max_range: f64,
    pub radar_density_ratio: f64,
    pub radar_position_noise_sigma: f64,
    pub radar_false_positive_rate: f64,
    pub max_placement_retries: usize,

    pub pillar_channels: usize,
    pub channels: usize,
    pub convblock_depth: usize,

    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub delta: f64,
    pub sigma: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub teacher_steps: usize,
    pub inherit_teacher_weights: bool,
    pub det_loss_enabled: bool,
    pub afd_normalization: AfdNormalization,

    pub grad_seeds: u64,
    pub grad_epsilon: f64,
    pub grad_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let grid = GridGeometry::default();
        let net = NetConfig::default();
        let train = TrainConfig::default();
        Self {
            out: PathBuf::from("run"),
            seed: 0,
            n_scenes: 20,
            range_x_min: grid.range_x.0,
            range_x_max: grid.range_x.1,
            range_y_min: grid.range_y.0,
            range_y_max: grid.range_y.1,
            meters_per_cell: grid.meters_per_cell,
            n_boxes: scene.n_boxes,
            lidar_points_per_box: scene.lidar_points_per_box,
            ground_points: scene.ground_points,
            ground_max_range: scene.ground_max_range,
            radar_density_ratio: scene.radar_density_ratio,
            radar_position_noise_sigma: scene.radar_position_noise_sigma,
            radar_false_positive_rate: scene.radar_false_positive_rate,
            max_placement_retries: scene.max_placement_retries,
            pillar_channels: net.pillar_channels,
            channels: net.channels,
            convblock_depth: net.convblock_depth,
            alpha: train.alpha,
            beta: train.beta,
            lambda1: train.lambda1,
            lambda2: train.lambda2,
            gamma: train.gamma,
            delta: train.delta,
            sigma: train.sigma,
            learning_rate: train.learning_rate,
            steps: train.steps,
            teacher_steps: train.teacher_steps,
            inherit_teacher_weights: train.inherit_teacher_weights,
            det_loss_enabled: train.det_loss_enabled,
            afd_normalization: train.afd_normalization,
            grad_seeds: 10,
            grad_epsilon: 1e-5,
            grad_tolerance: 1e-5,
        }
    }
}

impl RunConfig {
    /// Every accepted key.
    pub fn keys() -> BTreeSet<String> {
        match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => BTreeSet::new(),
        }
    }

    /// Loads `path` (or the defaults) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let Value::Object(entries) = file else {
                return Err(CliError::Config(format!("{}: expected a JSON object", p.display())));
            };
            merge(&mut value, entries)?;
        }
        let mut patch = Map::new();
        for (k, v) in overrides {
            patch.insert(k.clone(), parse_scalar(v));
        }
        merge(&mut value, patch)?;
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |r: bevkd::Result<()>| {
            r.map_err(|e| match e {
                bevkd::Error::Config(m) => CliError::Config(m),
                other => CliError::Core(other),
            })
        };
        core(self.scene_config(self.seed).validate())?;
        core(self.model_spec().validate())?;
        core(self.train_config().validate())?;
        if !(self.grad_epsilon > 0.0 && self.grad_tolerance > 0.0) {
            return Err(CliError::Config("grad_epsilon and grad_tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn scene_config(&self, seed: u64) -> SceneConfig {
        SceneConfig {
            range_x: (self.range_x_min, self.range_x_max),
            range_y: (self.range_y_min, self.range_y_max),
            n_boxes: self.n_boxes,
            lidar_points_per_box: self.lidar_points_per_box,
            ground_points: self.ground_points,
            ground_max_range: self.ground_max_range,
            radar_density_ratio: self.radar_density_ratio,
            radar_position_noise_sigma: self.radar_position_noise_sigma,
            radar_false_positive_rate: self.radar_false_positive_rate,
            density_cell_size: self.meters_per_cell,
            classes: default_classes(),
            max_placement_retries: self.max_placement_retries,
            seed,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut net = NetConfig::with_channels(self.pillar_channels, self.channels, default_classes().len());
        net.convblock_depth = self.convblock_depth;
        ModelSpec {
            net,
            grid: GridGeometry {
                range_x: (self.range_x_min, self.range_x_max),
                range_y: (self.range_y_min, self.range_y_max),
                meters_per_cell: self.meters_per_cell,
            },
            rule: GaussianRule::default(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            gamma: self.gamma,
            delta: self.delta,
            sigma: self.sigma,
            learning_rate: self.learning_rate,
            steps: self.steps,
            teacher_steps: self.teacher_steps,
            seed: self.seed,
            inherit_teacher_weights: self.inherit_teacher_weights,
            det_loss_enabled: self.det_loss_enabled,
            afd_normalization: self.afd_normalization,
        }
    }
}

fn merge(base: &mut Value, patch: Map<String, Value>) -> Result<(), CliError> {
    let Value::Object(map) = base else { unreachable!("config is an object") };
    for (k, v) in patch {
        if !map.contains_key(&k) {
            return Err(CliError::Config(format!("unknown config key {k:?}")));
        }
        map.insert(k, v);
    }
    Ok(())
}

/// JSON literal if it parses as one, otherwise a bare string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits `--key=value` arguments naming config keys out of `args`.
///
/// Dashes in keys are read as underscores. Whatever is left goes to clap.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let keys = RunConfig::keys();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for a in args {
        let parsed = a
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .map(|(k, v)| (k.replace('-', "_"), v.to_string()))
            .filter(|(k, _)| keys.contains(k));
        match parsed {
            Some(kv) => overrides.push(kv),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}
