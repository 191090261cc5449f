//! Teacher pre-training, frozen-teacher distillation and evaluation.
//!
//! One scene per step. The teacher consumes LiDAR pillars, the student radar
//! pillars; both share the network layout apart from the student's CMA block.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::afd::{self, afd_total_with, AfdNormalization};
use crate::error::{Error, Result};
use crate::heatmap::{render_gt_heatmap, FeatureGeometry, GaussianRule, Heatmap};
use crate::loss::{self, det_loss, total_loss};
use crate::nn::{Branch, BranchGrads, BranchKind, BranchOutputs, NetConfig, ParamStore};
use crate::pfd::{self, partition_high, pfd_total, proposal_weights};
use crate::pillar::{encode_pillars, pillarize, GridGeometry};
use crate::scene::Scene;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub delta: f64,
    pub sigma: f64,
    pub learning_rate: f64,
    /// Distillation steps.
    pub steps: usize,
    /// Upper bound on teacher pre-training steps.
    pub teacher_steps: usize,
    pub seed: u64,
    pub inherit_teacher_weights: bool,
    pub det_loss_enabled: bool,
    pub afd_normalization: AfdNormalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: afd::DEFAULT_ALPHA,
            beta: afd::DEFAULT_BETA,
            lambda1: pfd::DEFAULT_LAMBDA1,
            lambda2: pfd::DEFAULT_LAMBDA2,
            gamma: loss::DEFAULT_GAMMA,
            delta: loss::DEFAULT_DELTA,
            sigma: pfd::DEFAULT_SIGMA,
            learning_rate: 1e-3,
            steps: 300,
            teacher_steps: 500,
            seed: 0,
            inherit_teacher_weights: true,
            det_loss_enabled: true,
            afd_normalization: AfdNormalization::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::Config(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Everything needed to turn a scene into network inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct ModelSpec {
    pub net: NetConfig,
    pub grid: GridGeometry,
    pub rule: GaussianRule,
}


impl ModelSpec {
    /// Output stride of the sparse encoder.
    pub const FEATURE_STRIDE: usize = 8;

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.grid.validate()?;
        let (h, w) = (self.grid.height(), self.grid.width());
        // three stride-2 stages, then two more inside CMA
        let q = Self::FEATURE_STRIDE * 4;
        if h % q != 0 || w % q != 0 {
            return Err(Error::Config(format!(
                "grid {h}x{w} must be divisible by {q} in both dimensions"
            )));
        }
        Ok(())
    }

    pub fn feature_geometry(&self) -> FeatureGeometry {
        FeatureGeometry {
            grid: self.grid,
            stride: Self::FEATURE_STRIDE,
        }
    }
}

/// Network inputs and target for one scene.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub lidar: FeatureMap,
    pub radar: FeatureMap,
    pub gt: Heatmap,
}

pub fn prepare_scene(scene: &Scene, spec: &ModelSpec) -> Result<PreparedScene> {
    let c = spec.net.pillar_channels;
    let lidar = encode_pillars(&pillarize(&scene.lidar, &spec.grid)?, c)?;
    let radar = encode_pillars(&pillarize(&scene.radar, &spec.grid)?, c)?;
    let rendered = render_gt_heatmap(
        &scene.boxes,
        &spec.feature_geometry(),
        spec.net.classes,
        &spec.rule,
    )?;
    Ok(PreparedScene {
        lidar,
        radar,
        gt: rendered.heatmap,
    })
}

/// Adam with bias correction and a fixed learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name)?;
            if g.data.len() != p.data.len() || m.data.len() != p.data.len() {
                return Err(Error::ShapeMismatch(format!("optimizer state for {name:?}")));
            }
            let v = self.v.get_mut(name)?;
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / b1t;
                let vh = v.data[k] / b2t;
                p.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn ensure_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericInstability(format!("{what} became {v}")))
    }
}

fn student_heatmap(out: &BranchOutputs) -> Result<Heatmap> {
    if !out.heatmap.all_finite() {
        return Err(Error::NumericInstability("non-finite heatmap".into()));
    }
    Heatmap::new(out.heatmap.clone())
}

/// Outcome of teacher pre-training.
#[derive(Debug, Clone)]
pub struct TeacherReport {
    pub params: ParamStore,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_run: usize,
    /// Suite-mean detection loss after each completed pass over the scenes.
    pub epoch_losses: Vec<f64>,
}

/// Suite-mean detection loss of a branch on the given inputs.
pub fn mean_det_loss(
    branch: &Branch,
    params: &ParamStore,
    scenes: &[PreparedScene],
    lidar: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for s in scenes {
        let input = if lidar { &s.lidar } else { &s.radar };
        let (out, _) = branch.forward(params, input)?;
        total += det_loss(&student_heatmap(&out)?, &s.gt)?.value;
    }
    Ok(total / scenes.len() as f64)
}

/// Trains the LiDAR branch with detection loss only.
///
/// Stops at the end of the first pass over `scenes` whose mean loss is at most
/// half the initial mean, or after `cfg.teacher_steps` steps.
pub fn pretrain_teacher(
    spec: &ModelSpec,
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
) -> Result<TeacherReport> {
    if scenes.is_empty() {
        return Err(Error::Precondition("teacher pre-training needs at least one scene".into()));
    }
    spec.validate()?;
    cfg.validate()?;
    let branch = Branch::new(&spec.net, BranchKind::Teacher);
    let mut params = branch.init(cfg.seed);
    let mut opt = Adam::new(&params, cfg.learning_rate);
    let initial = mean_det_loss(&branch, &params, scenes, true)?;
    ensure_finite("initial teacher loss", initial)?;
    let mut report = TeacherReport {
        params: params.clone(),
        initial_loss: initial,
        final_loss: initial,
        steps_run: 0,
        epoch_losses: Vec::new(),
    };
    for step in 0..cfg.teacher_steps {
        let s = &scenes[step % scenes.len()];
        let (out, trace) = branch.forward(&params, &s.lidar)?;
        let det = det_loss(&student_heatmap(&out)?, &s.gt)?;
        ensure_finite("teacher detection loss", det.value)?;
        let grads = branch.backward(
            &params,
            &trace,
            &out,
            &BranchGrads {
                logits: Some(det.grad),
                ..Default::default()
            },
        )?;
        opt.step(&mut params, &grads)?;
        if !params.all_finite() {
            return Err(Error::NumericInstability(format!(
                "teacher parameters diverged at step {step}"
            )));
        }
        report.steps_run = step + 1;
        let epoch_done = (step + 1) % scenes.len() == 0 || step + 1 == cfg.teacher_steps;
        if epoch_done {
            let m = mean_det_loss(&branch, &params, scenes, true)?;
            ensure_finite("teacher suite loss", m)?;
            debug!("teacher step {}: suite det loss {m:.5}", step + 1);
            report.epoch_losses.push(m);
            report.final_loss = m;
            if m <= 0.5 * initial {
                break;
            }
        }
    }
    info!(
        "teacher pre-training: {} steps, det loss {:.5} -> {:.5}",
        report.steps_run, report.initial_loss, report.final_loss
    );
    report.params = params;
    Ok(report)
}

/// Per-step scalars and region statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    #[serde(rename = "L_det")]
    pub l_det: f64,
    #[serde(rename = "L_AFD")]
    pub l_afd: f64,
    #[serde(rename = "L_PFD")]
    pub l_pfd: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub ar_cosine: Option<f64>,
    pub active_ratio_l: f64,
    pub active_ratio_l1: f64,
    pub n_ar: usize,
    pub n_ir: usize,
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_fn: usize,
}

/// Gradients of the total loss w.r.t. student features and parameters.
#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub l1: Option<FeatureMap>,
    pub l2: Option<FeatureMap>,
    pub h1: Option<FeatureMap>,
    pub h2: Option<FeatureMap>,
    pub logits: Option<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub metrics: StepMetrics,
    pub features: FeatureGrads,
    pub params: ParamStore,
}

/// Teacher features the distillation losses compare against.
#[derive(Debug, Clone)]
pub struct TeacherFeatures {
    pub f_l: FeatureMap,
    pub h1: FeatureMap,
    pub h2: FeatureMap,
}

/// Mean per-cell cosine similarity over cells active in both maps.
///
/// `None` when no cell is active in both.
pub fn ar_cosine(teacher: &FeatureMap, student: &FeatureMap) -> Result<Option<f64>> {
    teacher.ensure_same_shape(student, "ar_cosine")?;
    let lidar = afd::active_mask(teacher)?;
    let radar = afd::active_mask(student)?;
    let part = afd::partition_low(&radar, &lidar)?;
    if part.n_ar == 0 {
        return Ok(None);
    }
    let (c, n) = (teacher.channels(), teacher.cells());
    let (tv, sv) = (teacher.values(), student.values());
    let mut acc = 0.0;
    for k in (0..n).filter(|&k| part.ar[k]) {
        let (mut dot, mut nt, mut ns) = (0.0, 0.0, 0.0);
        for ch in 0..c {
            let (a, b) = (tv[ch * n + k], sv[ch * n + k]);
            dot += a * b;
            nt += a * a;
            ns += b * b;
        }
        acc += dot / (nt.sqrt() * ns.sqrt());
    }
    Ok(Some(acc / part.n_ar as f64))
}

/// Losses and gradients for one student forward pass; nothing is updated.
struct Evaluated {
    metrics: StepMetrics,
    features: FeatureGrads,
    out: BranchOutputs,
}

fn evaluate_student(
    cfg: &TrainConfig,
    teacher: &TeacherFeatures,
    out: BranchOutputs,
    gt: &Heatmap,
    step: usize,
) -> Result<Evaluated> {
    let (l1, l2) = match (&out.l1, &out.l2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Precondition("student branch has no CMA outputs".into())),
    };
    let afd = afd_total_with(&teacher.f_l, l1, l2, cfg.alpha, cfg.beta, cfg.afd_normalization)?;
    let pred = student_heatmap(&out)?;
    let regions = partition_high(gt, &pred, cfg.sigma)?;
    let weights = proposal_weights(&regions, cfg.lambda1, cfg.lambda2)?;
    let pfd = pfd_total((&teacher.h1, &teacher.h2), (&out.h1, &out.h2), &weights)?;
    let det = if cfg.det_loss_enabled {
        Some(det_loss(&pred, gt)?)
    } else {
        None
    };
    let l_det = det.as_ref().map_or(0.0, |d| d.value);
    let l_total = total_loss(l_det, afd.value, pfd.value, cfg.gamma, cfg.delta);
    ensure_finite("L_AFD", afd.value)?;
    ensure_finite("L_PFD", pfd.value)?;
    ensure_finite("L_total", l_total)?;
    let low = &afd.terms[1].partition;
    let metrics = StepMetrics {
        step,
        l_det,
        l_afd: afd.value,
        l_pfd: pfd.value,
        l_total,
        ar_cosine: ar_cosine(&teacher.f_l, l2)?,
        active_ratio_l: out.f_l.active_ratio(),
        active_ratio_l1: l1.active_ratio(),
        n_ar: low.n_ar,
        n_ir: low.n_ir,
        n_tp: regions.n_tp,
        n_fp: regions.n_fp,
        n_fn: regions.n_fn,
    };
    // zero weights leave their terms out entirely so that gamma = delta = 0
    // follows the detection-only arithmetic exactly
    let scaled = |g: FeatureMap, w: f64| (w != 0.0).then(|| g.scaled(w));
    let features = FeatureGrads {
        l1: scaled(afd.grad_l1, cfg.gamma),
        l2: scaled(afd.grad_l2, cfg.gamma),
        h1: scaled(pfd.grad_h1, cfg.delta),
        h2: scaled(pfd.grad_h2, cfg.delta),
        logits: det.map(|d| d.grad),
    };
    Ok(Evaluated {
        metrics,
        features,
        out,
    })
}

/// Student, frozen teacher and optimizer.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub spec: ModelSpec,
    pub cfg: TrainConfig,
    teacher_branch: Branch,
    student_branch: Branch,
    teacher: ParamStore,
    student: ParamStore,
    opt: Adam,
    step: usize,
    pub history: Vec<StepMetrics>,
}

impl TrainState {
    /// Fresh student; with `inherit_teacher_weights`, every parameter whose name
    /// and shape match the teacher's is copied over.
    pub fn new(spec: ModelSpec, cfg: TrainConfig, teacher: ParamStore) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        let teacher_branch = Branch::new(&spec.net, BranchKind::Teacher);
        let student_branch = Branch::new(&spec.net, BranchKind::Student);
        let reference = teacher_branch.init(0);
        for (name, p) in reference.iter() {
            let t = teacher.get(name)?;
            if t.shape != p.shape {
                return Err(Error::Config(format!(
                    "teacher parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape, p.shape
                )));
            }
        }
        let mut student = student_branch.init(cfg.seed.wrapping_add(1));
        if cfg.inherit_teacher_weights {
            let copied = student.inherit_from(&teacher);
            debug!("inherited {} teacher parameters", copied.len());
        }
        let opt = Adam::new(&student, cfg.learning_rate);
        Ok(Self {
            spec,
            cfg,
            teacher_branch,
            student_branch,
            teacher,
            student,
            opt,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn teacher(&self) -> &ParamStore {
        &self.teacher
    }

    pub fn student(&self) -> &ParamStore {
        &self.student
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn teacher_features(&self, scene: &PreparedScene) -> Result<TeacherFeatures> {
        let (out, _) = self.teacher_branch.forward(&self.teacher, &scene.lidar)?;
        Ok(TeacherFeatures {
            f_l: out.f_l,
            h1: out.h1,
            h2: out.h2,
        })
    }

    pub fn student_outputs(&self, scene: &PreparedScene) -> Result<BranchOutputs> {
        Ok(self.student_branch.forward(&self.student, &scene.radar)?.0)
    }

    /// Applies one Adam update; on any non-finite parameter the previous state is kept.
    fn apply(&mut self, grads: &ParamStore) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NumericInstability(format!(
                "non-finite gradient at step {}",
                self.step
            )));
        }
        let mut params = self.student.clone();
        let mut opt = self.opt.clone();
        opt.step(&mut params, grads)?;
        if !params.all_finite() {
            return Err(Error::NumericInstability(format!(
                "student parameters diverged at step {}",
                self.step
            )));
        }
        self.student = params;
        self.opt = opt;
        Ok(())
    }

    /// One distillation update on `scene`. On error the state is unchanged.
    pub fn distill_step(&mut self, scene: &PreparedScene) -> Result<LossReport> {
        let teacher = self.teacher_features(scene)?;
        self.distill_step_with(scene, &teacher)
    }

    /// [`Self::distill_step`] with teacher features computed beforehand.
    pub fn distill_step_with(
        &mut self,
        scene: &PreparedScene,
        teacher: &TeacherFeatures,
    ) -> Result<LossReport> {
        let (out, trace) = self.student_branch.forward(&self.student, &scene.radar)?;
        let ev = evaluate_student(&self.cfg, teacher, out, &scene.gt, self.step)?;
        let up = BranchGrads {
            l1: ev.features.l1.clone(),
            l2: ev.features.l2.clone(),
            h1: ev.features.h1.clone(),
            h2: ev.features.h2.clone(),
            logits: ev.features.logits.clone(),
        };
        let grads = self
            .student_branch
            .backward(&self.student, &trace, &ev.out, &up)?;
        self.apply(&grads)?;
        self.step += 1;
        self.history.push(ev.metrics.clone());
        Ok(LossReport {
            metrics: ev.metrics,
            features: ev.features,
            params: grads,
        })
    }

    /// Detection-only update of the student, bypassing the distillation losses.
    pub fn detection_step(&mut self, scene: &PreparedScene) -> Result<LossReport> {
        let (out, trace) = self.student_branch.forward(&self.student, &scene.radar)?;
        let det = det_loss(&student_heatmap(&out)?, &scene.gt)?;
        ensure_finite("L_det", det.value)?;
        let up = BranchGrads {
            logits: Some(det.grad.clone()),
            ..Default::default()
        };
        let grads = self
            .student_branch
            .backward(&self.student, &trace, &out, &up)?;
        self.apply(&grads)?;
        let metrics = StepMetrics {
            step: self.step,
            l_det: det.value,
            l_afd: 0.0,
            l_pfd: 0.0,
            l_total: det.value,
            ar_cosine: None,
            active_ratio_l: out.f_l.active_ratio(),
            active_ratio_l1: out.l1.as_ref().map_or(0.0, |m| m.active_ratio()),
            n_ar: 0,
            n_ir: 0,
            n_tp: 0,
            n_fp: 0,
            n_fn: 0,
        };
        self.step += 1;
        self.history.push(metrics.clone());
        Ok(LossReport {
            metrics,
            features: FeatureGrads {
                l1: None,
                l2: None,
                h1: None,
                h2: None,
                logits: Some(det.grad),
            },
            params: grads,
        })
    }

    /// Runs `cfg.steps` distillation steps cycling through `scenes`.
    pub fn run(&mut self, scenes: &[PreparedScene]) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::Precondition("distillation needs at least one scene".into()));
        }
        let teacher: Vec<TeacherFeatures> = scenes
            .iter()
            .map(|s| self.teacher_features(s))
            .collect::<Result<_>>()?;
        for _ in 0..self.cfg.steps {
            let k = self.step % scenes.len();
            let r = self.distill_step_with(&scenes[k], &teacher[k])?;
            debug!(
                "step {}: L_total {:.5} L_AFD {:.3e} L_PFD {:.5}",
                r.metrics.step, r.metrics.l_total, r.metrics.l_afd, r.metrics.l_pfd
            );
        }
        Ok(())
    }

    /// Read-only pass over `scenes`; metrics are means over scenes.
    pub fn evaluate(&self, scenes: &[PreparedScene]) -> Result<EvalMetrics> {
        let per: Vec<StepMetrics> = scenes
            .iter()
            .map(|s| {
                let teacher = self.teacher_features(s)?;
                let out = self.student_outputs(s)?;
                Ok(evaluate_student(&self.cfg, &teacher, out, &s.gt, self.step)?.metrics)
            })
            .collect::<Result<_>>()?;
        Ok(EvalMetrics::from_steps(self.step, &per))
    }
}

/// Suite means of the per-scene metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub step: usize,
    pub scenes: usize,
    #[serde(rename = "L_det")]
    pub l_det: f64,
    #[serde(rename = "L_AFD")]
    pub l_afd: f64,
    #[serde(rename = "L_PFD")]
    pub l_pfd: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    /// Mean over scenes that have at least one AR cell.
    pub ar_cosine: Option<f64>,
    pub active_ratio_l: f64,
    pub active_ratio_l1: f64,
    pub n_ar: f64,
    pub n_ir: f64,
    pub n_tp: f64,
    pub n_fp: f64,
    pub n_fn: f64,
}

impl EvalMetrics {
    pub fn from_steps(step: usize, per: &[StepMetrics]) -> Self {
        let n = per.len().max(1) as f64;
        let mean = |f: &dyn Fn(&StepMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
        let cos: Vec<f64> = per.iter().filter_map(|m| m.ar_cosine).collect();
        Self {
            step,
            scenes: per.len(),
            l_det: mean(&|m| m.l_det),
            l_afd: mean(&|m| m.l_afd),
            l_pfd: mean(&|m| m.l_pfd),
            l_total: mean(&|m| m.l_total),
            ar_cosine: (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64),
            active_ratio_l: mean(&|m| m.active_ratio_l),
            active_ratio_l1: mean(&|m| m.active_ratio_l1),
            n_ar: mean(&|m| m.n_ar as f64),
            n_ir: mean(&|m| m.n_ir as f64),
            n_tp: mean(&|m| m.n_tp as f64),
            n_fp: mean(&|m| m.n_fp as f64),
            n_fn: mean(&|m| m.n_fn as f64),
        }
    }
}
