use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn splatpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatpose"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn requires_an_input() {
    let out = splatpose(&[]);
    assert!(!out.status.success());
}

#[test]
fn invalid_schedule_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "iterations = 400\npose_interval = 200\npose_cutoff = 100\n");
    let out_dir = dir.path().join("out");
    let out = splatpose(&[
        "--synthetic",
        "views=4",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists(), "nothing should run before validation");
}

#[test]
fn unknown_key_and_bad_synthetic_spec_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rate = 3\n");
    assert_eq!(
        splatpose(&["--synthetic", "views=4", "--config", &cfg]).status.code(),
        Some(1)
    );
    assert_eq!(splatpose(&["--synthetic", "views=zero"]).status.code(), Some(1));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(
        splatpose(&["--dataset", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );
    // Images but no intrinsics file.
    fs::create_dir(dir.path().join("imgs")).unwrap();
    fs::write(dir.path().join("imgs/a.ppm"), "P3\n1 1\n255\n0 0 0\n").unwrap();
    assert_eq!(
        splatpose(&["--dataset", dir.path().join("imgs").to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn too_few_registered_views_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    // A featureless scene leaves nothing to match.
    let out = splatpose(&[
        "--synthetic",
        "views=3,size=32,texture=0,noise=0",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synthetic_run_then_eval_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "iterations = 200\npose_interval = 25\ncorrespondences = exact\n",
    );
    let out_dir = dir.path().join("out");
    let out = splatpose(&[
        "--synthetic",
        "views=8,size=48,seed=2",
        "--config",
        &cfg,
        "--seed",
        "5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "cloud.ply",
        "trajectory.txt",
        "config.txt",
        "metrics.csv",
        "loss.csv",
        "lk_trace.csv",
        "pose_error.csv",
        "loss.svg",
        "pose_error.svg",
    ] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    assert!(out_dir.join("renders/view_000.png").is_file());
    assert!(fs::read_to_string(out_dir.join("config.txt"))
        .unwrap()
        .contains("seed = 5"));

    let eval_dir = dir.path().join("eval");
    let out = splatpose(&[
        "--synthetic",
        "views=8,size=48,seed=2",
        "--eval-only",
        out_dir.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // The PLY stores 9 significant digits, so the re-evaluated numbers agree
    // closely but not bit for bit.
    let row = |p: &Path| -> Vec<f64> {
        let text = fs::read_to_string(p).unwrap();
        let line = text.lines().nth(1).unwrap().to_string();
        line.split(',').skip(1).map(|v| v.parse().unwrap()).collect()
    };
    let (a, b) = (row(&out_dir.join("metrics.csv")), row(&eval_dir.join("metrics.csv")));
    assert_eq!(a.len(), 5);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{a:?} vs {b:?}");
    }
}

#[test]
fn eval_only_with_missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = splatpose(&[
        "--synthetic",
        "views=4",
        "--eval-only",
        dir.path().join("none").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
