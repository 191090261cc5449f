//! Cross-modality feature distillation in bird's-eye view.
//!
//! A LiDAR teacher and a 4D-radar student share one pillar-based detector
//! layout. The student learns from the teacher through two feature losses:
//! an active-region term on the low-level scatter map and a proposal-region
//! term on the high-level dense features. Everything runs on a synthetic
//! scene generator in double precision, and every backward pass is checked
//! against central finite differences.
//!
//! Module map:
//!
//! - [`tensor`], [`gradcheck`]: the dense C×H×W map, the differentiable-op
//!   contract and the finite-difference checker.
//! - [`scene`], [`scene_io`]: synthetic paired point clouds and their file format.
//! - [`pillar`]: point-to-pillar scatter and the per-pillar encoding.
//! - [`nn`]: convolutions, the sparse and dense encoders, the cross-modality
//!   aggregation block and the center head.
//! - [`heatmap`], [`loss`]: Gaussian center targets and the focal detection loss.
//! - [`afd`], [`pfd`]: the two distillation losses.
//! - [`trainer`]: teacher pretraining, distillation steps and evaluation.
//! - [`gradsuite`]: the registered gradient-check cases for every op.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor;
pub mod gradcheck;

pub mod scene;
pub mod scene_io;
pub mod pillar;
pub mod nn;

pub mod heatmap;
pub mod loss;
pub mod afd;
pub mod pfd;

pub mod trainer;
pub mod gradsuite;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, GradPair};
pub use gradcheck::{finite_diff_check, CheckOptions, CheckReport, DiffOp};
pub use scene::{gen_scene, Scene, SceneConfig};
pub use trainer::{ModelSpec, TrainConfig, TrainState};
