use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ratio_forge_cli::manifest::RunManifest;
use ratio_forge_core::data::brute_force_divergence;
use ratio_forge_core::{DiscretePair, FGen};
use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ratio-forge"));
    cmd.env_remove("RATIO_FORGE_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("bad json {text:?}: {e}"))
}

fn small_train<'a>(dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--out", dir, "--steps", "60", "--log-every", "20", "--hidden", "8,8", "--batch", "16"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn zero_steps_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = run(&["train", "--out", d, "--steps", "0"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(log, "step,mean_r_real,mean_r_fake,dstep_loss,gstep_loss,div_delta,flag\n");
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn train_writes_log_manifest_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = run(&small_train(d, &["--snapshot-every", "40", "--snapshot-size", "7", "--dataset", "gauss2d"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(!log.contains('\r'));
    let steps: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["20", "40", "60"]);
    for l in &lines[1..] {
        assert!(l.ends_with(",ok"));
        // 17 significant digits: d.dddddddddddddddde±x
        let mantissa = l.split(',').nth(1).unwrap().split('e').next().unwrap();
        assert_eq!(mantissa.trim_start_matches('-').len(), 18);
    }
    let manifest = RunManifest::read(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.artifacts.samples, vec!["samples_40.csv", "samples_60.csv"]);
    assert_eq!(manifest.status.steps_done, 60);
    assert!(manifest.status.halted.is_none());
    let snap = fs::read_to_string(dir.path().join("samples_60.csv")).unwrap();
    assert_eq!(snap.lines().count(), 7);
    assert_eq!(snap.lines().next().unwrap().split(',').count(), 2);
    let summary = stdout_json(&out);
    assert_eq!(summary["run_id"], manifest.run_id);
}

#[test]
fn same_seed_gives_byte_identical_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run(&small_train(d.path().to_str().unwrap(), &["--seed", "5"]));
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "log.csv"), read(b.path(), "log.csv"));
    assert_eq!(read(a.path(), "samples_60.csv"), read(b.path(), "samples_60.csv"));
}

#[test]
fn seed_comes_from_the_environment() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let args = |d: &tempfile::TempDir| small_train(d.path().to_str().unwrap(), &[]).into_iter().map(String::from).collect::<Vec<_>>();
    assert!(bin().args(args(&a)).env("RATIO_FORGE_SEED", "11").status().unwrap().success());
    assert!(bin().args(args(&b)).arg("--seed").arg("11").status().unwrap().success());
    assert!(bin().args(args(&c)).status().unwrap().success());
    let log = |d: &tempfile::TempDir| fs::read(d.path().join("log.csv")).unwrap();
    assert_eq!(log(&a), log(&b));
    assert_ne!(log(&a), log(&c));
}

#[test]
fn manifest_replay_reproduces_the_run() {
    let first = tempfile::tempdir().unwrap();
    let replay = tempfile::tempdir().unwrap();
    let out = run(&small_train(first.path().to_str().unwrap(), &["--divergence", "kl", "--relative-alpha", "0.2", "--seed", "3"]));
    assert_eq!(out.status.code(), Some(0));
    let manifest = first.path().join("manifest.json");
    let out = run(&["train", "--out", replay.path().to_str().unwrap(), "--from-manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(first.path().join("log.csv")).unwrap(), fs::read(replay.path().join("log.csv")).unwrap());
    let a = RunManifest::read(&manifest).unwrap();
    let b = RunManifest::read(&replay.path().join("manifest.json")).unwrap();
    assert_eq!(a.config, b.config);
    assert_eq!(a.run_id, b.run_id);
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for args in [
        vec!["train", "--out", d, "--divergence", "hellinger"],
        vec!["train", "--out", d, "--gstep", "nope"],
        vec!["train", "--out", d, "--lr", "-1"],
        vec!["train", "--out", d, "--batch", "0"],
        vec!["train", "--out", d, "--dataset", "no-such-dataset"],
        vec!["train", "--out", d, "--steps", "ten"],
        vec!["train"],
        vec!["estimate-ratio", "--p", "gauss1d"],
        vec!["estimate-ratio", "--p", "gauss1d", "--q", "gauss2d", "--steps", "1"],
        vec!["estimate-divergence", "--p", "gauss1d", "--q", "gauss1d", "--estimator", "table"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn stability_halt_exits_with_code_three_and_keeps_partial_log() {
    // Adam moves every parameter by about lr per step, so the next forward
    // pass overflows.
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = run(&["train", "--out", d, "--steps", "1000", "--log-every", "50", "--hidden", "4", "--lr", "1e300"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let last = log.lines().last().unwrap();
    assert!(last.ends_with(",nan"), "{last}");
    let manifest = RunManifest::read(&dir.path().join("manifest.json")).unwrap();
    assert!(manifest.status.halted.is_some());
    assert!(manifest.status.steps_done < 1000);
}

#[test]
fn estimate_ratio_on_identical_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate-ratio", "--p", "gauss1d", "--q", "gauss1d", "--divergence", "pearson", "--samples", "2000",
        "--steps", "2000", "--hidden", "16,16", "--seed", "1", "--ratio-scale", "2", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    let mean = report["mean_ratio"].as_f64().unwrap();
    assert!((mean - 1.0).abs() < 0.1, "{report}");
    let csv = fs::read_to_string(dir.path().join("ratio.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "x0,r_hat,r_true");
    assert_eq!(csv.lines().count(), 2001);
}

#[test]
fn estimate_ratio_reports_relative_error_on_a_grid() {
    let out = run(&[
        "estimate-ratio", "--p", "gauss1d:1:1", "--q", "gauss1d:0:1", "--samples", "4000", "--steps", "8000",
        "--hidden", "16,16", "--grid", "-2:3:101", "--seed", "0",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["eval_points"], 101);
    let mse = report["relative_mse"].as_f64().unwrap();
    assert!(mse < 0.1, "{report}");
    assert!(report["output"].is_null());
}

#[test]
fn estimate_divergence_identical_inputs_is_near_zero() {
    let out = run(&[
        "estimate-divergence", "--p", "gauss1d", "--q", "gauss1d", "--divergence", "kl", "--steps", "2000",
        "--hidden", "16,16", "--seed", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert!(report["plugin"].as_f64().unwrap().abs() < 0.05, "{report}");
    assert!(report["variational"].as_f64().unwrap().abs() < 0.05, "{report}");
    assert_eq!(report["analytic"].as_f64().unwrap(), 0.0);
}

fn write_points(path: &Path, points: &[(f64, usize)]) {
    let mut text = String::new();
    for &(x, count) in points {
        for _ in 0..count {
            text.push_str(&format!("{x}\n"));
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn table_estimator_matches_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let (p_path, q_path) = (dir.path().join("p.csv"), dir.path().join("q.csv"));
    // p = [0.5, 0.25, 0.25], q = [0.125, 0.375, 0.5]
    write_points(&p_path, &[(0.0, 4), (1.0, 2), (2.0, 2)]);
    write_points(&q_path, &[(2.0, 4), (0.0, 1), (1.0, 3)]);
    let pair = DiscretePair::new(vec![0.5, 0.25, 0.25], vec![0.125, 0.375, 0.5]).unwrap();
    for (name, gen) in [("pearson", FGen::PEARSON), ("kl", FGen::KL), ("rkl", FGen::REVERSED_KL)] {
        let out = run(&[
            "estimate-divergence", "--p", p_path.to_str().unwrap(), "--q", q_path.to_str().unwrap(),
            "--estimator", "table", "--divergence", name,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let report = stdout_json(&out);
        let exact = brute_force_divergence(&pair, gen).unwrap();
        assert!((report["plugin"].as_f64().unwrap() - exact).abs() < 1e-9, "{name}: {report}");
        assert!((report["variational"].as_f64().unwrap() - exact).abs() < 1e-9, "{name}: {report}");
    }
}

#[test]
fn table_estimator_rejects_unsupported_points() {
    let dir = tempfile::tempdir().unwrap();
    let (p_path, q_path) = (dir.path().join("p.csv"), dir.path().join("q.csv"));
    write_points(&p_path, &[(0.0, 1), (5.0, 1)]);
    write_points(&q_path, &[(0.0, 2)]);
    let out = run(&[
        "estimate-divergence", "--p", p_path.to_str().unwrap(), "--q", q_path.to_str().unwrap(), "--estimator", "table",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
