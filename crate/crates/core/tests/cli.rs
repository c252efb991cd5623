use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_opg-fpad"));
    c.env_remove("OPG_FPAD_CACHE");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "patch_size": 32,
        "max_patches_per_image": 6,
        "noise_dim": 8,
        "gen_channels": 8,
        "critic_channels": 4,
        "gan_epochs": 1,
        "critic_steps": 2,
        "growth_rate": 4,
        "block_layers": [2, 2],
        "stem_channels": 8,
        "head_dense": [16, 8],
        "batch_size": 16,
        "clf_epochs": 1,
        "learning_rate": 0.001,
        "workers": 1
    });
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

/// Fixture plus its scanned manifest.
fn setup(sensors: usize) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&["fixture", "--out", data.to_str().unwrap(), "--sensors", &sensors.to_string(), "--per-class", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    let manifest = dir.path().join("manifest.json");
    let cfg = tiny_config(dir.path());
    (dir, manifest, cfg)
}

#[test]
fn scan_writes_manifest_and_counts() {
    let (dir, manifest, _) = setup(2);
    let data = dir.path().join("data");
    let o = run(&["scan", data.to_str().unwrap(), "--out", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(manifest.exists());
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("sensor_a") && out.contains("latex"));

    let o = run(&["scan", data.to_str().unwrap(), "--out", manifest.to_str().unwrap(), "--format", "json"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["sensors"].as_array().unwrap().len(), 2);

    let o = run(&["scan", "/definitely/not/here", "--out", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn unknown_flags_are_usage_errors() {
    assert_eq!(run(&["scan"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn generator_bundle_workflow() {
    let (dir, manifest, cfg) = setup(2);
    let data = dir.path().join("data");
    assert!(run(&["scan", data.to_str().unwrap(), "--out", manifest.to_str().unwrap()]).status.success());
    let (m, c) = (manifest.to_str().unwrap(), cfg.to_str().unwrap());
    let bundle = dir.path().join("bundle");
    let b = bundle.to_str().unwrap();

    let o = run(&["train-opg", "--manifest", m, "--holdout", "sensor_a", "--config", c, "--out", b]);
    assert!(o.status.success(), "{}", text(&o));
    for j in 0..9 {
        assert!(bundle.join(format!("section_{j}.ckpt")).exists());
    }

    // A cache hit skips training.
    let cache = dir.path().join("cache");
    let with_cache = |args: &[&str]| bin().env("OPG_FPAD_CACHE", &cache).args(args).output().unwrap();
    let args = ["train-opg", "--manifest", m, "--holdout", "sensor_a", "--config", c];
    assert!(with_cache(&args).status.success());
    let o = with_cache(&args);
    assert!(o.status.success());
    assert!(text(&o).contains("cache hit"), "{}", text(&o));

    let sheet = |out: &str, count: &str| {
        let p = dir.path().join(out);
        let o = run(&["gen-patches", "--bundle", b, "--section", "4", "--count", count, "--seed", "7", "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o));
        p
    };
    let a = sheet("g1", "16");
    let img = image::open(a.join("contact_sheet.png")).unwrap();
    assert_eq!((img.width(), img.height()), (4 * 32, 4 * 32));
    let again = sheet("g2", "16");
    assert_eq!(
        std::fs::read(a.join("contact_sheet.png")).unwrap(),
        std::fs::read(again.join("contact_sheet.png")).unwrap()
    );
    let empty = sheet("g0", "0");
    assert_eq!(std::fs::read_dir(empty).unwrap().count(), 0);

    // Classifier training with augmentation, then evaluation.
    let models = dir.path().join("models");
    let o = run(&[
        "train-clf", "--manifest", m, "--sensor", "sensor_a", "--use-opg", "--bundle", b, "--config", c, "--out",
        models.to_str().unwrap(), "--format", "json",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    for a in v["augmentation"].as_array().unwrap() {
        assert_eq!(a["generated"], a["spoof"]);
    }
    for j in 0..9 {
        assert!(models.join("sensor_a").join(format!("section_{j}_history.csv")).exists());
    }

    let report = dir.path().join("report");
    let o = run(&[
        "evaluate", "--manifest", m, "--sensor", "sensor_a", "--checkpoints", models.to_str().unwrap(), "--config", c,
        "--out", report.to_str().unwrap(), "--det",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(report.join("metrics.json")).unwrap()).unwrap();
    for k in ["apcer", "bpcer", "ace", "accuracy"] {
        assert!(metrics[k].is_number(), "{k} missing in {metrics}");
    }
    assert!(report.join("det.svg").exists());

    let cross = dir.path().join("cross");
    let o = run(&[
        "evaluate", "--manifest", m, "--sensor", "sensor_b", "--train-sensor", "sensor_a", "--checkpoints",
        models.to_str().unwrap(), "--config", c, "--out", cross.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("sensor_a -> sensor_b: accuracy"));
}

#[test]
fn protocol_errors_exit_with_two() {
    let (dir, manifest, cfg) = setup(1);
    let data = dir.path().join("data");
    assert!(run(&["scan", data.to_str().unwrap(), "--out", manifest.to_str().unwrap()]).status.success());
    let (m, c) = (manifest.to_str().unwrap(), cfg.to_str().unwrap());
    let out = dir.path().join("b");
    let o = run(&["train-opg", "--manifest", m, "--holdout", "sensor_a", "--config", c, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("leave-one-out impossible"));

    let o = run(&[
        "train-clf", "--manifest", m, "--sensor", "sensor_a", "--use-opg", "--config", c, "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));

    let o = run(&["train-clf", "--manifest", "/missing/manifest.json", "--sensor", "x", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn run_command_writes_experiment_layout() {
    let (dir, manifest, cfg) = setup(2);
    let data = dir.path().join("data");
    assert!(run(&["scan", data.to_str().unwrap(), "--out", manifest.to_str().unwrap()]).status.success());
    let out = dir.path().join("exp");
    let o = run(&[
        "run", "--manifest", manifest.to_str().unwrap(), "--sensor", "sensor_a", "--test-sensor", "sensor_b",
        "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--format", "json",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let run_dir = out.join("cross_sensor").join("sensor_a__sensor_b");
    assert!(run_dir.join("experiment.json").exists());
    assert!(run_dir.join("opg_provenance.json").exists());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["accuracy"].as_f64().is_some_and(|a| (0.0..=100.0).contains(&a)));

    // The saved experiment file replays.
    let o = run(&["run", "--experiment", run_dir.join("experiment.json").to_str().unwrap(), "--format", "json"]);
    assert!(o.status.success(), "{}", text(&o));
    let w: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["accuracy"], w["accuracy"]);
}
