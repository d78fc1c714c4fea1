//! Exit-code contract and diagnostic-dump checks for the binary.

use std::fs;
use std::path::Path;
use std::process::Command;

fn clip() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clip"))
}

fn base_args(data: &Path) -> Vec<String> {
    vec![
        "--data".into(),
        data.display().to_string(),
        "--cluster-col".into(),
        "subj".into(),
        "--x-col".into(),
        "x".into(),
        "--nuisance-cols".into(),
        "z".into(),
        "--outcome-cols".into(),
        "y1".into(),
    ]
}

fn write_csv(path: &Path, n_clusters: usize) {
    let mut csv = String::from("subj,x,z,y1\n");
    let mut v = 0.71f64;
    for subj in 0..n_clusters {
        for _ in 0..3 {
            v = (v * 991.0 + 0.237).fract();
            let x = v - 0.5;
            v = (v * 991.0 + 0.237).fract();
            csv.push_str(&format!("s{subj},{x},{},{}\n", v, 0.3 * x + v));
        }
    }
    fs::write(path, csv).unwrap();
}

#[test]
fn reported_p_respects_flip_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, 8);
    let output = clip()
        .arg("test")
        .args(base_args(&data))
        .args(["--b", "1000", "--seed", "1"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let global = report["global_p"].as_f64().unwrap();
    assert!(global >= 0.001);
    for outcome in report["per_outcome"].as_array().unwrap() {
        assert!(outcome["raw_p"].as_f64().unwrap() >= 0.001);
    }
}

#[test]
fn exhaustive_cap_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, 25);
    let output = clip()
        .arg("test")
        .args(base_args(&data))
        .args(["--exhaustive", "--b", "10"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("exhaustive"), "stderr: {stderr}");
}

#[test]
fn single_cluster_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, 1);
    let output = clip().arg("test").args(base_args(&data)).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn nan_cell_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    fs::write(&data, "subj,x,z,y1\na,0.1,0.2,NaN\nb,0.3,0.1,0.5\n").unwrap();
    let output = clip().arg("test").args(base_args(&data)).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn singular_nuisance_is_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    // two identical nuisance columns
    let mut csv = String::from("subj,x,z,w,y1\n");
    let mut v = 0.4f64;
    for subj in 0..4 {
        for _ in 0..3 {
            v = (v * 991.0 + 0.237).fract();
            csv.push_str(&format!("s{subj},{},{v},{v},{}\n", v - 0.5, v + 0.1));
        }
    }
    fs::write(&data, csv).unwrap();
    let output = clip()
        .arg("test")
        .args([
            "--data",
            data.to_str().unwrap(),
            "--cluster-col",
            "subj",
            "--x-col",
            "x",
            "--nuisance-cols",
            "z,w",
            "--outcome-cols",
            "y1",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).contains("score:"));
}

#[test]
fn failed_run_writes_no_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, 1); // single cluster: validation failure
    let out = dir.path().join("report.json");
    let output = clip()
        .arg("test")
        .args(base_args(&data))
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn inspect_dumps_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, 6);
    let out_dir = dir.path().join("dumps");
    let status = clip()
        .arg("inspect")
        .args(base_args(&data))
        .args(["--b", "64", "--seed", "9", "--out-dir"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let n_total = report["n_total"].as_f64().unwrap();

    // sign matrix row 1 all +1
    let signs = fs::read_to_string(out_dir.join("signs.csv")).unwrap();
    let first_row = signs.lines().nth(1).unwrap();
    assert!(first_row.split(',').all(|s| s == "1"));

    // zeta column sums match reported S * sqrt(n)
    let zeta = fs::read_to_string(out_dir.join("zeta.csv")).unwrap();
    let mut sum = 0.0f64;
    for line in zeta.lines().skip(1) {
        sum += line.split(',').nth(1).unwrap().parse::<f64>().unwrap();
    }
    let s_reported = report["per_outcome"][0]["s"].as_f64().unwrap();
    assert!((sum - s_reported * n_total.sqrt()).abs() <= 1e-10 * s_reported.abs().max(1.0));

    // flip-score matrix row 1 equals the observed studentized statistic
    let flips = fs::read_to_string(out_dir.join("flip_scores.csv")).unwrap();
    let observed: f64 = flips.lines().nth(1).unwrap().parse().unwrap();
    let s_student = report["per_outcome"][0]["s_studentized"].as_f64().unwrap();
    assert!((observed - s_student).abs() <= 1e-12 * s_student.abs().max(1.0));
}

#[test]
fn manifest_digests_recompute() {
    use sha2::{Digest, Sha256};

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, 5);
    let output = clip()
        .arg("test")
        .args(base_args(&data))
        .args(["--b", "50", "--seed", "2"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let manifest = &report["manifest"];
    assert_eq!(manifest["digest_algorithm"], "sha256");

    let mut hasher = Sha256::new();
    hasher.update(fs::read(&data).unwrap());
    let recomputed = format!("{:x}", hasher.finalize());
    assert_eq!(
        manifest["input_digests"][0]["digest"].as_str().unwrap(),
        recomputed
    );

    let mut hasher = Sha256::new();
    hasher.update(manifest["command"].as_str().unwrap().as_bytes());
    assert_eq!(
        manifest["config_digest"].as_str().unwrap(),
        format!("{:x}", hasher.finalize())
    );
}

#[test]
fn simulate_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(
        &config,
        "kind = \"univariate\"\nn_clusters = 1\nnj = 5\nbeta = [0.0]\nseed = 1\n",
    )
    .unwrap();
    let output = clip()
        .args(["simulate", "--config"])
        .arg(&config)
        .args(["--reps", "2"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn simulate_rejects_clip_user() {
    let output = clip()
        .args([
            "simulate", "--scenario", "u41", "--reps", "1", "--b", "10", "--methods",
            "clip_user",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("clip_user"));
}

#[test]
fn simulate_preset_defaults_echo() {
    // the multivariate preset carries N=100 and M=10
    let output = clip()
        .args([
            "simulate", "--scenario", "m42", "--reps", "1", "--b", "20", "--seed", "3",
            "--methods", "ols",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let csv = String::from_utf8_lossy(&output.stdout);
    let mut outcome_rows = 0;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[2], "100");
        if fields[3].starts_with("outcome:") {
            outcome_rows += 1;
        }
    }
    assert_eq!(outcome_rows, 10);
}
