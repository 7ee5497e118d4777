//! End-to-end smoke tests: the teacher-smoke preset through the library
//! pipeline, every subcommand through the compiled binary, and the exit
//! code contract.

use flatmeter_cli::config::{preset_teacher_smoke, ExperimentConfig};
use flatmeter_cli::pipeline::run_experiment;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::tempdir;

fn flatmeter() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flatmeter"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn teacher_smoke_end_to_end_is_deterministic() {
    let dir = tempdir().unwrap();
    let cfg = preset_teacher_smoke();
    let outcome = run_experiment(&cfg, dir.path(), None).unwrap();
    assert_eq!(outcome.train.trained, 6);
    assert_eq!(outcome.train.converged, 6, "smoke preset must converge");
    assert_eq!(outcome.records.len(), 6);
    assert_eq!(outcome.pairs.len(), 6);
    for pair in &outcome.pairs {
        assert!(pair.certificate.passed);
        assert!(
            pair.kappa_max_rel_change < 1e-9,
            "kappa must be invariant, changed by {}",
            pair.kappa_max_rel_change
        );
        assert!(pair.kappa_tau_max_rel_change < 1e-9);
        assert!(pair.rho_max_rel_change < 1e-9);
        // The raw spectrum is NOT invariant: layer-wise factors in [5,25]
        // move λ_max by 1/α² ∉ [1-ε, 1+ε].
        let expected = pair.expected_raw_ratio.as_ref().unwrap();
        for (got, want) in pair.raw_lambda_ratio.iter().zip(expected) {
            assert!(
                (got - want).abs() <= 1e-6 * want.abs(),
                "raw λ ratio {got} should equal 1/α² = {want}"
            );
        }
    }
    assert!(outcome.correlations.iter().all(|r| r.coefficient.is_finite()));

    let csv1 = std::fs::read(&outcome.csv_path).unwrap();
    let dir2 = tempdir().unwrap();
    let again = run_experiment(&cfg, dir2.path(), None).unwrap();
    let csv2 = std::fs::read(&again.csv_path).unwrap();
    assert_eq!(csv1, csv2, "fresh rerun must reproduce the CSV byte for byte");

    // Resume on the completed directory: nothing retrains, output identical.
    let resumed = run_experiment(&cfg, dir.path(), None).unwrap();
    assert_eq!(resumed.train.trained, 0);
    assert_eq!(resumed.train.skipped, 6);
    let csv3 = std::fs::read(&resumed.csv_path).unwrap();
    assert_eq!(csv1, csv3, "resume must reproduce the CSV byte for byte");
}

#[test]
fn binary_subcommands_compose() {
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("exp");

    // Stage the config as a file to exercise the file-loading path, with a
    // smaller grid than the preset.
    let mut cfg: ExperimentConfig = preset_teacher_smoke();
    cfg.grid.repeats = 2;
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let out = run_ok(flatmeter().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("trained 4 runs"), "stdout: {stdout}");

    run_ok(flatmeter().args(["measure", out_dir.to_str().unwrap()]));
    run_ok(flatmeter().args(["reparam", out_dir.to_str().unwrap(), "--factor-range", "5,25"]));

    let out = run_ok(flatmeter().args(["correlate", out_dir.to_str().unwrap(), "--stat", "spearman"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("spearman kappa_tau.l1"), "stdout: {stdout}");
    assert!(Path::new(&out_dir.join("report").join("results.csv")).exists());

    let out = run_ok(flatmeter().args([
        "correlate",
        out_dir.to_str().unwrap(),
        "--source",
        "reparam",
        "--keys",
        "kappa_tau.l1,kappa_max",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("kappa_max"), "stdout: {stdout}");

    // Single-checkpoint measurement with a layer filter.
    let ckpt = out_dir
        .join("runs")
        .join("xavier_normal-b32-lr0.05-r0")
        .join("checkpoint.ckpt");
    let out = run_ok(flatmeter().args([
        "measure",
        ckpt.to_str().unwrap(),
        "--config",
        "teacher-smoke",
        "--layers",
        "2",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("kappa.l2 ="), "stdout: {stdout}");
    assert!(!stdout.contains("kappa.l1 ="), "layer filter must drop l1: {stdout}");
    assert!(stdout.contains("kappa_max ="), "aggregates always print: {stdout}");

    // A layer index past the network depth is an error, not a no-op.
    let out = flatmeter()
        .args(["measure", ckpt.to_str().unwrap(), "--config", "teacher-smoke", "--layers", "9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("out of range"), "stderr: {stderr}");
}

#[test]
fn binary_exit_codes_follow_the_contract() {
    // Usage errors → 2.
    let out = flatmeter().arg("bogus-subcommand").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = flatmeter().args(["verify", "bogus-suite"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = flatmeter().args(["experiment", "no-such-preset", "--out", "/tmp/x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Validation failures → 1.
    let out = flatmeter()
        .args(["measure", "/nonexistent/checkpoint.ckpt", "--config", "teacher-smoke"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Success → 0 (fast suite).
    let out = flatmeter().args(["verify", "invariance"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS theorem-1-invariance"), "stdout: {stdout}");
}
