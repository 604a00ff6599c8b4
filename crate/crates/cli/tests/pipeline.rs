//! End-to-end exercises of the `gms` binary: artifact layout, pipeline
//! composition, exit codes, and the rerun-determinism guarantee.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn gms(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gms"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gms(dir, args);
    assert!(
        out.status.success(),
        "gms {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn simulate_oracle_ci_pipeline_produces_ordered_intervals() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["simulate", "--design", "linear_toy", "--seed", "5", "--out-dir", "."]);
    ok(dir, &[
        "oracle", "--y", "y.csv", "--x", "x.csv", "--family", "linear", "--b", "80", "--s", "20",
        "--seed", "5", "--out-dir", ".",
    ]);
    ok(dir, &[
        "ci", "--draws", "draws.csv", "--estimate", "estimate.csv", "--methods",
        "percentile,basic", "--out-dir", ".",
    ]);
    for name in ["y.csv", "x.csv", "truth.json", "draws.csv", "estimate.csv"] {
        assert!(dir.join(name).exists(), "{name} missing");
    }
    for name in ["ci_percentile.csv", "ci_basic.csv"] {
        let body = read(dir, name);
        let mut rows = 0;
        for line in body.lines().filter(|l| !l.starts_with('#')).skip(1) {
            let fields: Vec<f64> =
                line.split(',').skip(1).map(|f| f.parse().unwrap()).collect();
            assert!(fields[0] <= fields[1], "{name}: {line}");
            rows += 1;
        }
        assert_eq!(rows, 10, "{name} should cover all coordinates");
    }
    let json: serde_json::Value =
        serde_json::from_str(&read(dir, "ci_percentile.json")).unwrap();
    assert_eq!(json["method"], "percentile");
    assert_eq!(json["level"], 0.95);
}

#[test]
fn train_generate_ci_pipeline_supports_the_double_bootstrap() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["simulate", "--design", "linear_toy", "--seed", "1", "--out-dir", "."]);
    ok(dir, &[
        "train", "--y", "y.csv", "--x", "x.csv", "--family", "linear", "--s", "10",
        "--iterations", "250", "--batch", "20", "--hidden", "16", "--depth", "1",
        "--seed", "1", "--out-dir", ".",
    ]);
    ok(dir, &[
        "generate", "--params", "params.bin", "--b", "60", "--c", "4", "--seed", "2",
        "--out-dir", ".",
    ]);
    ok(dir, &[
        "ci", "--draws", "draws.csv", "--second-draws", "second_draws.csv", "--estimate",
        "estimate.csv", "--methods", "percentile,basic,calibrated,studentized",
        "--out-dir", ".",
    ]);
    for m in ["percentile", "basic", "calibrated", "studentized"] {
        assert!(dir.join(format!("ci_{m}.json")).exists(), "ci_{m}.json missing");
    }
    let second = read(dir, "second_draws.csv");
    let header = second.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.starts_with("b,c,"), "second level carries parent ids: {header}");
}

#[test]
fn calibrated_interval_without_second_level_is_a_config_error() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["simulate", "--design", "linear_toy", "--seed", "3", "--out-dir", "."]);
    ok(dir, &[
        "oracle", "--y", "y.csv", "--x", "x.csv", "--family", "linear", "--b", "20", "--s", "10",
        "--out-dir", ".",
    ]);
    let out = gms(dir, &[
        "ci", "--draws", "draws.csv", "--estimate", "estimate.csv", "--methods", "calibrated",
        "--out-dir", ".",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("second-draws"));
}

#[test]
fn mismatched_draw_and_estimate_widths_fail_cleanly() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("draws.csv"), "b,coef_0,coef_1\n0,1.0,2.0\n1,1.5,2.5\n").unwrap();
    std::fs::write(dir.join("estimate.csv"), "estimate\n1.0\n2.0\n3.0\n").unwrap();
    let out = gms(dir, &[
        "ci", "--draws", "draws.csv", "--estimate", "estimate.csv", "--methods", "percentile",
        "--out-dir", ".",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("coordinates"), "unexpected message: {err}");
}

#[test]
fn unknown_design_exits_2_and_lists_the_catalog() {
    let tmp = tempdir().unwrap();
    let out = gms(tmp.path(), &["simulate", "--design", "linear_toys", "--out-dir", "."]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("quantile_feng") && err.contains("gmm_2pt"), "{err}");
}

#[test]
fn singular_designs_exit_3() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("y.csv"), "y\n1.0\n2.0\n3.0\n").unwrap();
    std::fs::write(dir.join("x.csv"), "x_0,x_1\n1.0,2.0\n1.0,2.0\n1.0,2.0\n").unwrap();
    let out = gms(dir, &[
        "oracle", "--y", "y.csv", "--x", "x.csv", "--family", "linear", "--b", "5", "--out-dir", ".",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numeric failure"));
}

#[test]
fn reruns_are_byte_identical_without_timestamps() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    for sub in ["a", "b"] {
        ok(dir, &[
            "simulate", "--design", "gmm_2pt", "--seed", "9", "--no-timestamp", "--out-dir", sub,
        ]);
    }
    assert_eq!(read(dir, "a/y.csv"), read(dir, "b/y.csv"));
    assert_eq!(read(dir, "a/truth.json"), read(dir, "b/truth.json"));
    // With timestamps on, only the leading comment line may differ.
    ok(dir, &["simulate", "--design", "gmm_2pt", "--seed", "9", "--out-dir", "c"]);
    let stamped = read(dir, "c/y.csv");
    assert!(stamped.starts_with("# generated "), "{}", &stamped[..30.min(stamped.len())]);
    let unstamped = read(dir, "a/y.csv");
    let tail: Vec<&str> = stamped.lines().skip(1).collect();
    let plain: Vec<&str> = unstamped.lines().collect();
    assert_eq!(tail, plain);
}

#[test]
fn run_config_supplies_defaults_and_rejects_wrong_commands() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["simulate", "--design", "linear_toy", "--seed", "4", "--out-dir", "."]);
    std::fs::write(
        dir.join("run.json"),
        r#"{
  "command": "oracle",
  "family": "linear",
  "y": "y.csv",
  "x": "x.csv",
  "seed": 4
}"#,
    )
    .unwrap();
    ok(dir, &["oracle", "--config", "run.json", "--b", "30", "--s", "10", "--out-dir", "."]);
    assert!(dir.join("draws.csv").exists());
    let out = gms(dir, &["ci", "--config", "run.json", "--out-dir", "."]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config is for command 'oracle'"));
}

#[test]
fn cv_reports_a_minimizer_on_the_grid() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["simulate", "--design", "linear_toy", "--seed", "6", "--out-dir", "."]);
    let stdout = ok(dir, &[
        "cv", "--y", "y.csv", "--x", "x.csv", "--penalty", "l1", "--lambda-grid",
        "0.01,0.1,1.0", "--folds", "4", "--b", "10", "--s", "20", "--seed", "6",
        "--out-dir", ".",
    ]);
    assert!(stdout.contains("minimizer mode lambda"), "{stdout}");
    let curve = read(dir, "cv_curve.csv");
    let rows = curve.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 4, "header plus one row per grid point: {curve}");
    assert!(curve.lines().any(|l| l.starts_with("lambda,mean,lower,upper,plain")));
}

#[test]
fn npmle_pipeline_emits_posterior_artifacts() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["simulate", "--design", "bmm_2pt", "--seed", "8", "--out-dir", "."]);
    ok(dir, &[
        "npmle", "--y", "y.csv", "--family", "npmle_binomial:10", "--q", "10", "--s", "25",
        "--iterations", "150", "--latent-draws", "10", "--weight-draws", "10",
        "--posterior-draws", "100", "--hidden", "16", "--depth", "1", "--seed", "8",
        "--out-dir", ".",
    ]);
    for name in [
        "mixture_params.bin",
        "train_trace.csv",
        "tau.csv",
        "em.json",
        "posterior_draws.csv",
        "density.csv",
        "posterior_means.csv",
    ] {
        assert!(dir.join(name).exists(), "{name} missing");
    }
    let tau: f64 = read(dir, "tau.csv")
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.parse::<f64>().unwrap())
        .sum();
    assert!((tau - 1.0).abs() < 1e-8, "mixture probabilities sum to 1, got {tau}");
    // Binomial support: densities evaluated on the integer grid only.
    let density = read(dir, "density.csv");
    for line in density.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let y: f64 = line.split(',').next().unwrap().parse().unwrap();
        assert_eq!(y.fract(), 0.0, "{line}");
    }
}
