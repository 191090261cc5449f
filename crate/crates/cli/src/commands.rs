use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bevkd::gradsuite::{run_suite_with, GradCase, SuiteOptions, SuiteReport};
use bevkd::nn::ParamStore;
use bevkd::pillar::pillarize;
use bevkd::scene_io::{write_scene, write_scene_csv};
use bevkd::trainer::{pretrain_teacher, prepare_scene, EvalMetrics, PreparedScene, TeacherFeatures};
use bevkd::{gen_scene, TrainState};
use log::info;
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

/// Creates `dir`, or checks that it is empty unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Refused(dir.to_path_buf()));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, format!("{text}\n")).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub boxes: usize,
    pub lidar_points: usize,
    pub radar_points: usize,
    pub lidar_pillars: usize,
    pub radar_pillars: usize,
    /// `radar_pillars / lidar_pillars` on the model grid; `None` without LiDAR pillars.
    pub density_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub base_seed: u64,
    pub configured_density_ratio: f64,
    /// Mean of the per-scene ratios.
    pub mean_density_ratio: Option<f64>,
    pub scenes: Vec<ManifestEntry>,
}

pub fn cmd_synth(cfg: &RunConfig, force: bool, csv: bool) -> Result<Manifest, CliError> {
    cfg.validate()?;
    prepare_out_dir(&cfg.out, force)?;
    let grid = cfg.model_spec().grid;
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for k in 0..cfg.n_scenes as u64 {
        let seed = cfg.seed.wrapping_add(k);
        let scene = gen_scene(&cfg.scene_config(seed))?;
        let file = format!("scene_{k:04}.bdls");
        write_scene(&cfg.out.join(&file), &scene)?;
        if csv {
            let path = cfg.out.join(format!("scene_{k:04}.csv"));
            let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
            write_scene_csv(BufWriter::new(f), &scene).map_err(|e| CliError::io(&path, e))?;
        }
        let lidar_pillars = pillarize(&scene.lidar, &grid)?.occupied();
        let radar_pillars = pillarize(&scene.radar, &grid)?.occupied();
        scenes.push(ManifestEntry {
            file,
            seed,
            boxes: scene.boxes.len(),
            lidar_points: scene.lidar.points.len(),
            radar_points: scene.radar.points.len(),
            lidar_pillars,
            radar_pillars,
            density_ratio: (lidar_pillars > 0).then(|| radar_pillars as f64 / lidar_pillars as f64),
        });
    }
    let ratios: Vec<f64> = scenes.iter().filter_map(|s| s.density_ratio).collect();
    let manifest = Manifest {
        base_seed: cfg.seed,
        configured_density_ratio: cfg.radar_density_ratio,
        mean_density_ratio: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
        scenes,
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Runs the finite-difference suite over `names`, building each case with `build`.
pub fn cmd_grad_check(
    cfg: &RunConfig,
    names: &[&str],
    build: &dyn Fn(&str, u64) -> bevkd::Result<GradCase>,
) -> Result<SuiteReport, CliError> {
    let opts = SuiteOptions {
        seeds: cfg.grad_seeds,
        first_seed: cfg.seed,
        epsilon: cfg.grad_epsilon,
        tolerance: cfg.grad_tolerance,
        ..SuiteOptions::default()
    };
    let rep = run_suite_with(names, &opts, build)?;
    for op in &rep.ops {
        info!(
            "{:<16} max rel error {:.3e} over {} coords [{}]",
            op.op,
            op.max_rel_error,
            op.coords_checked,
            if op.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(rep)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub force: bool,
    pub skip_pretrain: bool,
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub pretrained: bool,
    pub steps_run: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: RunConfig,
    pub teacher: TeacherSummary,
    pub initial: EvalMetrics,
    #[serde(rename = "final")]
    pub final_: EvalMetrics,
}

pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let teacher_path = opts.teacher.clone().unwrap_or_else(|| cfg.out.join("teacher.ckpt"));
    if opts.skip_pretrain && !teacher_path.is_file() {
        return Err(CliError::Config(format!(
            "--skip-pretrain needs a teacher checkpoint, none at {}",
            teacher_path.display()
        )));
    }
    if cfg.n_scenes == 0 {
        return Err(CliError::Config("training needs n_scenes >= 1".into()));
    }
    // read before the output directory is touched, it may live inside it
    let loaded = if opts.skip_pretrain {
        Some(ParamStore::load(&teacher_path)?)
    } else {
        None
    };
    prepare_out_dir(&cfg.out, opts.force)?;

    let spec = cfg.model_spec();
    let tcfg = cfg.train_config();
    let scenes: Vec<PreparedScene> = (0..cfg.n_scenes as u64)
        .map(|k| prepare_scene(&gen_scene(&cfg.scene_config(cfg.seed.wrapping_add(k)))?, &spec))
        .collect::<bevkd::Result<_>>()?;

    let (teacher, teacher_summary) = match loaded {
        Some(p) => (
            p,
            TeacherSummary {
                pretrained: false,
                steps_run: 0,
                initial_loss: None,
                final_loss: None,
            },
        ),
        None => {
            let r = pretrain_teacher(&spec, &scenes, &tcfg)?;
            let s = TeacherSummary {
                pretrained: true,
                steps_run: r.steps_run,
                initial_loss: Some(r.initial_loss),
                final_loss: Some(r.final_loss),
            };
            (r.params, s)
        }
    };
    teacher.save(&cfg.out.join("teacher.ckpt"))?;

    let mut state = TrainState::new(spec, tcfg, teacher)?;
    let initial = state.evaluate(&scenes)?;
    let features: Vec<TeacherFeatures> = scenes
        .iter()
        .map(|s| state.teacher_features(s))
        .collect::<bevkd::Result<_>>()?;
    let metrics_path = cfg.out.join("metrics.jsonl");
    let f = File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(f);
    let log_every = (cfg.steps / 10).max(1);
    for _ in 0..cfg.steps {
        let k = state.step_count() % scenes.len();
        let r = state.distill_step_with(&scenes[k], &features[k])?;
        let line = serde_json::to_string(&r.metrics).expect("metrics serialize");
        writeln!(metrics, "{line}").map_err(|e| CliError::io(&metrics_path, e))?;
        if r.metrics.step % log_every == 0 {
            info!(
                "step {}: L_total {:.4} L_det {:.4} L_AFD {:.3e} L_PFD {:.4}",
                r.metrics.step, r.metrics.l_total, r.metrics.l_det, r.metrics.l_afd, r.metrics.l_pfd
            );
        }
    }
    metrics.flush().map_err(|e| CliError::io(&metrics_path, e))?;
    state.student().save(&cfg.out.join("student.ckpt"))?;

    let summary = TrainSummary {
        config: cfg.clone(),
        teacher: teacher_summary,
        initial,
        final_: state.evaluate(&scenes)?,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}
