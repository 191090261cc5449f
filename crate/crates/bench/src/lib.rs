//! Shared fixtures for the criterion benches.

use bevkd::trainer::{prepare_scene, pretrain_teacher, PreparedScene};
use bevkd::{gen_scene, FeatureMap, ModelSpec, SceneConfig, TrainConfig, TrainState};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `range`, with a fraction `p_empty` of all-zero cells.
pub fn random_map(seed: u64, c: usize, h: usize, w: usize, p_empty: f64, range: Range<f64>) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = FeatureMap::zeros(c, h, w).expect("valid shape");
    let empty: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < p_empty).collect();
    for ch in 0..c {
        for (v, e) in f.channel_mut(ch).iter_mut().zip(&empty) {
            if !e {
                *v = rng.random_range(range.clone());
            }
        }
    }
    f
}

pub fn random_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-0.1..0.1)).collect()
}

pub fn default_scenes(n: u64) -> Vec<PreparedScene> {
    let spec = ModelSpec::default();
    (0..n)
        .map(|seed| {
            let scene = gen_scene(&SceneConfig { seed, ..SceneConfig::default() }).expect("scene");
            prepare_scene(&scene, &spec).expect("prepared scene")
        })
        .collect()
}

/// Default-spec distillation state with a briefly pre-trained teacher.
pub fn default_state(scenes: &[PreparedScene]) -> TrainState {
    let spec = ModelSpec::default();
    let cfg = TrainConfig {
        teacher_steps: 4,
        ..TrainConfig::default()
    };
    let teacher = pretrain_teacher(&spec, scenes, &cfg).expect("teacher");
    TrainState::new(spec, cfg, teacher.params).expect("state")
}
