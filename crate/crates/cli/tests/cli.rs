use std::path::Path;
use std::process::Command;

use bevkd::gradcheck::DiffOp;
use bevkd::gradsuite::{build_case, GradCase, REGISTERED_OPS};
use bevkd::scene_io::read_scene;
use bevkd::FeatureMap;
use bevkd_cli::report::CURVE_COLUMNS;
use bevkd_cli::{cmd_grad_check, cmd_synth, CliError, Manifest, RunConfig};
use tempfile::tempdir;

fn bevkd(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_bevkd"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Small grid and network so a full train finishes in well under a second.
const SMALL: &[&str] = &[
    "--range-x-min=-14.4",
    "--range-x-max=14.4",
    "--range-y-min=-14.4",
    "--range-y-max=14.4",
    "--n-boxes=4",
    "--ground-points=600",
    "--ground-max-range=10",
    "--channels=4",
    "--n-scenes=3",
    "--steps=6",
    "--teacher-steps=6",
];

fn train(dir: &Path, out: &str, extra: &[&str]) -> (i32, String, String) {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    bevkd(&args, dir)
}

fn read_manifest(path: &Path) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_realizes_configured_density() {
    let d = tempdir().unwrap();
    let (code, _, err) = bevkd(&["synth", "--out", "s", "--n-scenes=10", "--csv"], d.path());
    assert_eq!(code, 0, "{err}");
    let m = read_manifest(&d.path().join("s/manifest.json"));
    assert_eq!(m.scenes.len(), 10);
    let mean = m.mean_density_ratio.unwrap();
    assert!((0.07..=0.13).contains(&mean), "mean ratio {mean}");
    for (k, e) in m.scenes.iter().enumerate() {
        assert_eq!(e.seed, k as u64);
        let scene = read_scene(&d.path().join("s").join(&e.file)).unwrap();
        assert_eq!(scene.radar.points.len(), e.radar_points);
        assert!(d.path().join(format!("s/scene_{k:04}.csv")).is_file());
    }
}

#[test]
fn synth_zero_scenes_gives_empty_manifest() {
    let d = tempdir().unwrap();
    let (code, _, err) = bevkd(&["synth", "--out", "e", "--n-scenes=0"], d.path());
    assert_eq!(code, 0, "{err}");
    let m = read_manifest(&d.path().join("e/manifest.json"));
    assert!(m.scenes.is_empty());
    assert_eq!(m.mean_density_ratio, None);
}

#[test]
fn synth_refuses_non_empty_dir_without_force() {
    let d = tempdir().unwrap();
    std::fs::create_dir(d.path().join("s")).unwrap();
    std::fs::write(d.path().join("s/keep.txt"), "x").unwrap();
    let (code, _, err) = bevkd(&["synth", "--out", "s", "--n-scenes=1"], d.path());
    assert_eq!(code, 1);
    assert!(err.contains("--force"), "{err}");
    assert!(!d.path().join("s/manifest.json").exists());
    let (code, _, _) = bevkd(&["synth", "--out", "s", "--n-scenes=1", "--force"], d.path());
    assert_eq!(code, 0);
    assert!(d.path().join("s/keep.txt").exists());
}

#[test]
fn synth_is_deterministic() {
    let d = tempdir().unwrap();
    for out in ["a", "b"] {
        assert_eq!(bevkd(&["synth", "--out", out, "--n-scenes=2", "--seed", "5"], d.path()).0, 0);
    }
    for f in ["manifest.json", "scene_0000.bdls", "scene_0001.bdls"] {
        let a = std::fs::read(d.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(d.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn grad_check_passes_and_reports_json() {
    let d = tempdir().unwrap();
    let (code, out, err) = bevkd(&["grad-check", "--report", "g.json"], d.path());
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["ops"].as_array().unwrap().len(), REGISTERED_OPS.len());
    let file: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(file, v);
}

/// Forwards everything but scales the backward pass.
struct Corrupted(Box<dyn DiffOp>);

impl DiffOp for Corrupted {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn forward(&self, inputs: &[FeatureMap]) -> bevkd::Result<FeatureMap> {
        self.0.forward(inputs)
    }
    fn backward(&self, inputs: &[FeatureMap], upstream: &FeatureMap) -> bevkd::Result<Vec<FeatureMap>> {
        Ok(self.0.backward(inputs, upstream)?.iter().map(|g| g.scaled(1.5)).collect())
    }
}

#[test]
fn grad_check_names_corrupted_backward() {
    let build = |name: &str, seed: u64| -> bevkd::Result<GradCase> {
        let case = build_case(name, seed)?;
        if name == "tconv2d" {
            return Ok(GradCase {
                op: Box::new(Corrupted(case.op)),
                ..case
            });
        }
        Ok(case)
    };
    let cfg = RunConfig {
        grad_seeds: 2,
        ..RunConfig::default()
    };
    let rep = cmd_grad_check(&cfg, &REGISTERED_OPS, &build).unwrap();
    assert!(!rep.passed);
    assert_eq!(rep.failures, ["tconv2d"]);
    serde_json::to_string(&rep).unwrap();
}

#[test]
fn train_writes_artifacts_deterministically() {
    let (d, e) = (tempdir().unwrap(), tempdir().unwrap());
    for dir in [&d, &e] {
        let (code, _, err) = train(dir.path(), "a", &[]);
        assert_eq!(code, 0, "{err}");
    }
    for f in ["metrics.jsonl", "teacher.ckpt", "student.ckpt", "summary.json"] {
        let a = std::fs::read(d.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(e.path().join("a").join(f)).unwrap(), "{f}");
    }
    let lines = std::fs::read_to_string(d.path().join("a/metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for k in ["L_det", "L_AFD", "L_PFD", "L_total", "ar_cosine", "active_ratio_l1"] {
            assert!(v.get(k).is_some(), "{k} missing");
        }
    }
}

#[test]
fn skip_pretrain_reuses_teacher() {
    let d = tempdir().unwrap();
    assert_eq!(train(d.path(), "a", &[]).0, 0);
    let teacher = d.path().join("a/teacher.ckpt");
    let (code, _, err) = train(d.path(), "b", &["--skip-pretrain", "--teacher", teacher.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    // same teacher, same student seed: identical distillation
    let a = std::fs::read(d.path().join("a/metrics.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.path().join("b/metrics.jsonl")).unwrap());
}

#[test]
fn skip_pretrain_without_teacher_is_config_error() {
    let d = tempdir().unwrap();
    let (code, _, err) = train(d.path(), "a", &["--skip-pretrain"]);
    assert_eq!(code, 1);
    assert!(err.contains("teacher checkpoint"), "{err}");
    assert!(!d.path().join("a").exists());
}

#[test]
fn report_builds_tables_from_training_metrics() {
    let d = tempdir().unwrap();
    assert_eq!(train(d.path(), "a", &[]).0, 0);
    let (code, _, err) = bevkd(&["report", "a/metrics.jsonl", "--out", "r"], d.path());
    assert_eq!(code, 0, "{err}");
    let curves = std::fs::read_to_string(d.path().join("r/curves.csv")).unwrap();
    let mut lines = curves.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, CURVE_COLUMNS);
    assert_eq!(&header[..8], [
        "step", "L_det", "L_AFD", "L_PFD", "L_total", "ar_cosine", "active_ratio_l", "active_ratio_l1"
    ]);
    assert_eq!(lines.count(), 6);
    let regions = std::fs::read_to_string(d.path().join("r/regions.csv")).unwrap();
    for name in ["AR", "IR", "TP", "FP", "FN"] {
        let total: usize = regions
            .lines()
            .filter(|l| l.starts_with(&format!("{name},")))
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, 6, "{name}");
    }
}

#[test]
fn report_on_empty_metrics_is_header_only() {
    let d = tempdir().unwrap();
    std::fs::write(d.path().join("m.jsonl"), "").unwrap();
    let (code, _, err) = bevkd(&["report", "m.jsonl"], d.path());
    assert_eq!(code, 0, "{err}");
    let curves = std::fs::read_to_string(d.path().join("curves.csv")).unwrap();
    assert_eq!(curves, format!("{}\n", CURVE_COLUMNS.join(",")));
    let regions = std::fs::read_to_string(d.path().join("regions.csv")).unwrap();
    assert_eq!(regions.lines().count(), 1);
}

#[test]
fn exit_codes() {
    let d = tempdir().unwrap();
    assert_eq!(bevkd(&["train", "--bogus=1"], d.path()).0, 1);
    assert_eq!(bevkd(&["train", "--steps=lots"], d.path()).0, 1);
    assert_eq!(bevkd(&["synth", "--sigma=3"], d.path()).0, 1);
    assert_eq!(bevkd(&["report", "missing.jsonl"], d.path()).0, 2);
    std::fs::write(d.path().join("bad.jsonl"), "{not json}\n").unwrap();
    assert_eq!(bevkd(&["report", "bad.jsonl"], d.path()).0, 1);
    assert_eq!(bevkd(&["synth", "--config", "missing.json"], d.path()).0, 2);
    assert_eq!(bevkd(&["--help"], d.path()).0, 0);
}

#[test]
fn config_file_then_overrides_then_flags() {
    let d = tempdir().unwrap();
    let path = d.path().join("c.json");
    std::fs::write(&path, r#"{"n_scenes": 2, "seed": 9, "radar_density_ratio": 0.2, "out": "x"}"#).unwrap();
    let cfg = RunConfig::load(Some(&path), &[("n_scenes".into(), "1".into())]).unwrap();
    assert_eq!((cfg.n_scenes, cfg.seed, cfg.radar_density_ratio), (1, 9, 0.2));

    std::fs::write(&path, r#"{"n_scenes": 1, "typo_key": 3}"#).unwrap();
    assert!(matches!(RunConfig::load(Some(&path), &[]), Err(CliError::Config(_))));

    std::fs::write(&path, r#"{"n_scenes": 1, "seed": 9, "out": "from_file"}"#).unwrap();
    let (code, _, err) = bevkd(&["synth", "--config", "c.json", "--seed", "4", "--out", "flag"], d.path());
    assert_eq!(code, 0, "{err}");
    assert!(!d.path().join("from_file").exists());
    assert_eq!(read_manifest(&d.path().join("flag/manifest.json")).base_seed, 4);
}

#[test]
fn unwritable_out_dir_is_io_error() {
    let d = tempdir().unwrap();
    std::fs::write(d.path().join("file"), "x").unwrap();
    let cfg = RunConfig {
        out: d.path().join("file/sub"),
        n_scenes: 1,
        ..RunConfig::default()
    };
    let err = cmd_synth(&cfg, false, false).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}
