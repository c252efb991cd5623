use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use opg_fpad::opg::build_or_load_opg;
use opg_fpad::patching::PatchStore;
use opg_fpad::{DatasetManifest, RunConfig, Split};
use opg_fpad_ffi::*;

const TINY: &str = r#"{
    "patch_size": 32, "max_patches_per_image": 6, "noise_dim": 8, "gen_channels": 8,
    "critic_channels": 4, "gan_epochs": 1, "critic_steps": 2, "growth_rate": 4,
    "block_layers": [2, 2], "stem_channels": 8, "head_dense": [16, 8], "batch_size": 16,
    "clf_epochs": 1, "learning_rate": 0.001, "workers": 1
}"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn c_path(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    let p = opg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_config() -> *mut OpgConfig {
    let mut cfg = ptr::null_mut();
    let json = c(TINY);
    assert_eq!(unsafe { opg_config_from_json(json.as_ptr(), &mut cfg) }, OpgStatus::Ok);
    cfg
}

fn fixture(dir: &Path, sensors: usize) -> *mut OpgManifest {
    let mut m = ptr::null_mut();
    let d = c_path(dir);
    assert_eq!(unsafe { opg_fixture_create(3, sensors, 3, d.as_ptr(), &mut m) }, OpgStatus::Ok);
    m
}

#[test]
fn arithmetic_helpers() {
    assert_eq!(opg_ace(3.71, 3.89), (3.71 + 3.89) / 2.0);
    assert_eq!(opg_accuracy_from_ace(2.49), 100.0 - 2.49);
    assert!(opg_is_live(0.51, 0.5));
    assert!(!opg_is_live(0.5, 0.5));
    let mut out = 0.0;
    let scores = [0.2, 0.8, 0.8];
    assert_eq!(unsafe { opg_fuse_scores(scores.as_ptr(), 3, &mut out) }, OpgStatus::Ok);
    assert_eq!(out, 0.6);
    assert_eq!(unsafe { opg_fuse_scores(ptr::null(), 0, &mut out) }, OpgStatus::NoMinutiae);
    assert!(last_error().contains("empty"));
    let v = unsafe { CStr::from_ptr(opg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_errors_map_to_status_codes() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(opg_config_default(&mut cfg), OpgStatus::Ok);
        assert!(!cfg.is_null());
        opg_config_free(cfg);
        opg_config_free(ptr::null_mut());

        let bad = c("{\"patch_size\": 40}");
        assert_eq!(opg_config_from_json(bad.as_ptr(), &mut cfg), OpgStatus::Config);
        let garbage = c("{nope");
        assert_eq!(opg_config_from_json(garbage.as_ptr(), &mut cfg), OpgStatus::Parse);
        assert_eq!(opg_config_from_json(ptr::null(), &mut cfg), OpgStatus::NullArgument);
        assert!(last_error().contains("json"));
        let ok = c("{}");
        assert_eq!(opg_config_from_json(ok.as_ptr(), ptr::null_mut()), OpgStatus::NullArgument);
        let missing = c("/nonexistent/config.json");
        assert_eq!(opg_config_load(missing.as_ptr(), &mut cfg), OpgStatus::Io);
        let invalid = [0xffu8, 0];
        assert_eq!(
            opg_config_load(invalid.as_ptr().cast::<c_char>(), &mut cfg),
            OpgStatus::InvalidString
        );
    }
}

#[test]
fn manifest_sensor_names_copy_out() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path(), 2);
    unsafe {
        let mut n = 0;
        assert_eq!(opg_manifest_sensor_count(m, &mut n), OpgStatus::Ok);
        assert_eq!(n, 2);
        let mut need = 0;
        assert_eq!(
            opg_manifest_sensor_name(m, 0, ptr::null_mut(), 0, &mut need),
            OpgStatus::BufferTooSmall
        );
        let mut buf = vec![0 as c_char; need];
        assert_eq!(
            opg_manifest_sensor_name(m, 0, buf.as_mut_ptr(), buf.len(), ptr::null_mut()),
            OpgStatus::Ok
        );
        let name = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(name, loaded.sensors[0]);
        assert_eq!(
            opg_manifest_sensor_name(m, 5, buf.as_mut_ptr(), buf.len(), ptr::null_mut()),
            OpgStatus::OutOfRange
        );
        opg_manifest_free(m);

        let mut again = ptr::null_mut();
        let path = c_path(&dir.path().join("manifest.json"));
        assert_eq!(opg_manifest_load(path.as_ptr(), &mut again), OpgStatus::Ok);
        opg_manifest_free(again);
    }
}

#[test]
fn run_report_and_saved_model_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let m = fixture(data.path(), 2);
    let cfg = tiny_config();
    let manifest = DatasetManifest::load(&data.path().join("manifest.json")).unwrap();
    let sensor = manifest.sensors[0].clone();
    let (cs, co) = (c(&sensor), c_path(out.path()));
    unsafe {
        let mut report = ptr::null_mut();
        assert_eq!(
            opg_run_intra_sensor(m, cs.as_ptr(), cfg, false, co.as_ptr(), &mut report),
            OpgStatus::Ok,
            "{}",
            last_error()
        );
        let mut metrics = std::mem::zeroed::<OpgMetrics>();
        assert_eq!(opg_report_metrics(report, &mut metrics), OpgStatus::Ok);
        let n_test = manifest.select(Some(&sensor), Some(Split::Test), None).count();
        assert_eq!(metrics.n_live + metrics.n_spoof, n_test);
        assert!((0.0..=100.0).contains(&metrics.accuracy));
        assert_eq!(metrics.accuracy, 100.0 - metrics.ace);
        let mut count = 0;
        assert_eq!(opg_report_sample_count(report, &mut count), OpgStatus::Ok);
        assert_eq!(count, n_test);
        let (mut score, mut live) = (0.0, false);
        assert_eq!(opg_report_sample(report, 0, &mut score, &mut live), OpgStatus::Ok);
        assert!(score.is_nan() || (0.0..=1.0).contains(&score));
        assert_eq!(opg_report_sample(report, count, &mut score, &mut live), OpgStatus::OutOfRange);
        opg_report_free(report);

        let second = c(&manifest.sensors[1]);
        assert_eq!(
            opg_run_cross_sensor(m, cs.as_ptr(), cs.as_ptr(), cfg, false, ptr::null(), &mut report),
            OpgStatus::Protocol
        );
        assert_eq!(
            opg_run_cross_sensor(m, cs.as_ptr(), second.as_ptr(), cfg, false, ptr::null(), &mut report),
            OpgStatus::Ok
        );
        opg_report_free(report);

        let model_dir = c_path(&out.path().join("intra_sensor").join(&sensor));
        let mut model = ptr::null_mut();
        assert_eq!(
            opg_model_load(model_dir.as_ptr(), cs.as_ptr(), cfg, &mut model),
            OpgStatus::Ok,
            "{}",
            last_error()
        );
        let mut threshold = 0.0;
        assert_eq!(opg_model_threshold(model, &mut threshold), OpgStatus::Ok);
        assert_eq!(threshold, 0.5);
        let image = manifest
            .select(Some(&sensor), Some(Split::Test), None)
            .next()
            .unwrap()
            .path
            .clone();
        let ci = c(&image);
        assert_eq!(opg_model_score_image(model, ci.as_ptr(), &mut score), OpgStatus::Ok);
        assert!(score.is_nan() || (0.0..=1.0).contains(&score));
        let missing = c("/nonexistent/print.png");
        assert_eq!(opg_model_score_image(model, missing.as_ptr(), &mut score), OpgStatus::Io);
        opg_model_free(model);

        let other = c(&manifest.sensors[1]);
        assert_eq!(
            opg_model_load(model_dir.as_ptr(), other.as_ptr(), cfg, &mut model),
            OpgStatus::Io
        );
        opg_config_free(cfg);
        opg_manifest_free(m);
    }
}

#[test]
fn generator_samples_are_deterministic() {
    let data = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let m = fixture(data.path(), 2);
    unsafe { opg_manifest_free(m) };
    let manifest = DatasetManifest::load(&data.path().join("manifest.json")).unwrap();
    let cfg: RunConfig = serde_json::from_str(TINY).unwrap();
    let mut store = PatchStore::default();
    let (bundle, _) =
        build_or_load_opg(&manifest, &manifest.sensors[0], &mut store, &cfg, Some(cache.path())).unwrap();
    let bundle_dir = std::fs::read_dir(cache.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.join("provenance.json").exists())
        .unwrap();
    let dir = c_path(&bundle_dir);
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(opg_generator_load(dir.as_ptr(), &mut g), OpgStatus::Ok, "{}", last_error());
        let mut p = 0;
        assert_eq!(opg_generator_patch_size(g, &mut p), OpgStatus::Ok);
        assert_eq!(p, bundle.config().patch_size);
        let mut a = vec![0f32; 3 * p * p];
        let mut b = vec![0f32; 3 * p * p];
        assert_eq!(opg_generator_sample(g, 4, 3, 11, a.as_mut_ptr(), a.len()), OpgStatus::Ok);
        assert_eq!(opg_generator_sample(g, 4, 3, 11, b.as_mut_ptr(), b.len()), OpgStatus::Ok);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(
            opg_generator_sample(g, 4, 3, 11, a.as_mut_ptr(), a.len() - 1),
            OpgStatus::BufferTooSmall
        );
        assert_eq!(opg_generator_sample(g, 9, 1, 11, a.as_mut_ptr(), a.len()), OpgStatus::Config);
        assert_eq!(opg_generator_sample(g, 0, 0, 11, ptr::null_mut(), 0), OpgStatus::Ok);
        opg_generator_free(g);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("opg_fpad.h")
}

#[test]
fn header_declares_the_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "typedef struct OpgConfig OpgConfig;",
        "typedef struct OpgReport OpgReport;",
        "OPG_STATUS_BUFFER_TOO_SMALL = 11",
        "OpgStatus opg_run_intra_sensor(",
        "const char *opg_last_error_message(void);",
        "double opg_ace(double apcer, double bpcer);",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

/// Compile and run a small C program against the static library.
#[test]
fn c_program_links_against_the_static_library() {
    // Test binaries live in target/<profile>/deps; the library one level up.
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    // Test builds only produce the rlib, so build the static library.
    let mut build = Command::new(env!("CARGO"));
    build.args(["build", "-p", "opg-fpad-ffi", "--lib"]);
    if lib_dir.file_name().is_some_and(|n| n == "release") {
        build.arg("--release");
    }
    assert!(build.status().unwrap().success());
    let lib = lib_dir.join("libopg_fpad_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <math.h>
#include <stdio.h>
#include "opg_fpad.h"
int main(void) {
    double s[3] = {0.2, 0.8, 0.8}, fused = 0.0;
    if (opg_fuse_scores(s, 3, &fused) != OPG_STATUS_OK || fused != 0.6) return 1;
    if (opg_ace(3.71, 3.89) != (3.71 + 3.89) / 2.0) return 2;
    OpgConfig *cfg = NULL;
    if (opg_config_default(&cfg) != OPG_STATUS_OK || cfg == NULL) return 3;
    opg_config_free(cfg);
    if (opg_config_from_json("{\"patch_size\": 40}", &cfg) != OPG_STATUS_CONFIG) return 4;
    if (opg_last_error_message() == NULL) return 5;
    printf("%s\n", opg_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
