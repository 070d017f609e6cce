//! Behavior tests for the `mnl` binary: the exit-code contract (0 success,
//! 1 runtime failure, 2 config/usage error), flag overrides, refusal paths,
//! and the artifacts each command leaves behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn mnl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mnl"))
        .args(args)
        .output()
        .expect("spawn mnl")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A small but complete run config writing into `out`. Linear encoders so
/// certification has an exact sensitivity table available.
fn small_config(out: &Path) -> Value {
    json!({
        "synth": {
            "classes": 3, "dims": [5, 4], "separations": [2.5, 1.0], "sigma": 1.0,
            "train": 120, "val": 40, "test": 40
        },
        "train": { "epochs": 4, "warmup_epochs": 1, "batch_size": 32, "hidden": [] },
        "eval": {
            "kinds": ["gaussian"], "eps": [0.0, 2.0], "noised_modalities": [1], "seeds": [0]
        },
        "certify": { "attack": false, "tau": { "method": "exact-linear" } },
        "out_dir": out.to_str().unwrap(),
        "seed": 0
    })
}

/// Writes `cfg` into a scratch dir and returns (scratch, config path, out dir).
fn setup(mut mutate: impl FnMut(&mut Value)) -> (TempDir, PathBuf, PathBuf) {
    let scratch = TempDir::new().expect("temp dir");
    let out = scratch.path().join("out");
    let mut cfg = small_config(&out);
    mutate(&mut cfg);
    let path = scratch.path().join("run.cfg");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).expect("write config");
    (scratch, path, out)
}

fn resolved(out_dir: &Path) -> Value {
    let text = fs::read_to_string(out_dir.join("resolved_config.json"))
        .expect("resolved_config.json");
    serde_json::from_str(&text).expect("parse resolved config")
}

#[test]
fn missing_config_file_is_a_config_error_naming_the_path() {
    let out = mnl(&["train", "--config", "/nonexistent/missing.cfg"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("/nonexistent/missing.cfg"),
        "error must name the missing file: {}",
        stderr(&out)
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let (_scratch, cfg, _out) = setup(|c| {
        c["sneaky_knob"] = json!(1);
    });
    let out = mnl(&["gen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("sneaky_knob"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = mnl(&["train", "--no-such-flag"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn gen_writes_all_three_splits() {
    let (_scratch, cfg, out_dir) = setup(|_| {});
    let out = mnl(&["gen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    for name in ["train", "val", "test"] {
        assert!(
            out_dir.join(format!("{name}.mnld")).exists(),
            "{name} split missing"
        );
    }
    assert!(out_dir.join("resolved_config.json").exists());
}

#[test]
fn train_records_lambda_override_and_writes_artifacts() {
    let (_scratch, cfg, out_dir) = setup(|_| {});
    let out = mnl(&["train", "--config", cfg.to_str().unwrap(), "--lambda", "0"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("final fused accuracy"));
    let cfg_back = resolved(&out_dir);
    assert_eq!(cfg_back["train"]["lambda"], json!(0.0));
    assert!(out_dir.join("metrics.csv").exists());
    assert!(out_dir.join("model.mnlm").exists());
    assert!(out_dir.join("warmup.mnlm").exists());
}

#[test]
fn negative_lambda_is_rejected() {
    let (_scratch, cfg, _out) = setup(|_| {});
    let out = mnl(&["train", "--config", cfg.to_str().unwrap(), "--lambda=-1"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("lambda"), "stderr: {}", stderr(&out));
}

#[test]
fn seed_flag_overrides_the_master_seed_everywhere() {
    let (_scratch, cfg, out_dir) = setup(|_| {});
    let out = mnl(&["train", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let cfg_back = resolved(&out_dir);
    assert_eq!(cfg_back["seed"], json!(9));
    assert_eq!(cfg_back["synth"]["seed"], json!(9));
    assert_eq!(cfg_back["train"]["seed"], json!(9));
}

#[test]
fn rdm_flag_requires_prior_guidance() {
    let (_scratch, cfg, out_dir) = setup(|_| {});
    let out = mnl(&["train", "--config", cfg.to_str().unwrap(), "--rdm", "1"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("prior"), "stderr: {}", stderr(&out));

    let out = mnl(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--guidance",
        "prior",
        "--rdm",
        "1",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let cfg_back = resolved(&out_dir);
    assert_eq!(cfg_back["train"]["guidance"], json!({"mode": "prior", "rdm": 1}));
}

#[test]
fn unknown_guidance_mode_and_scope_are_rejected() {
    let (_scratch, cfg, _out) = setup(|_| {});
    let out = mnl(&["train", "--config", cfg.to_str().unwrap(), "--guidance", "psychic"]);
    assert_eq!(exit_code(&out), 2);
    let out = mnl(&["train", "--config", cfg.to_str().unwrap(), "--scope", "everything"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn certify_requires_an_existing_checkpoint() {
    let (_scratch, cfg, out_dir) = setup(|_| {});
    let missing = out_dir.join("model.mnlm");
    let out = mnl(&[
        "certify",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn certified_claim_from_sampled_constants_is_refused() {
    let (_scratch, cfg, out_dir) = setup(|c| {
        c["certify"]["tau"] = json!({"method": "sampled", "directions": 50, "radius": 0.5});
    });
    let train_out = mnl(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&train_out), 0, "stderr: {}", stderr(&train_out));
    let checkpoint = out_dir.join("model.mnlm");
    let out = mnl(&[
        "certify",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--claim",
        "certified",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(
        stderr(&out).contains("refusing"),
        "refusal must explain itself: {}",
        stderr(&out)
    );

    // The same checkpoint certifies fine once the claim matches the method.
    let out = mnl(&[
        "certify",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--claim",
        "estimate",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    assert!(out_dir.join("certification.csv").exists());
}

#[test]
fn certify_writes_exact_bounds_for_linear_models() {
    let (_scratch, cfg, out_dir) = setup(|_| {});
    let train_out = mnl(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&train_out), 0, "stderr: {}", stderr(&train_out));
    let checkpoint = out_dir.join("model.mnlm");
    let out = mnl(&[
        "certify",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let report = fs::read_to_string(out_dir.join("certification.csv")).expect("report");
    let header = report.lines().next().expect("header row");
    assert!(header.contains("R_lb") && header.contains("R_exact"), "header: {header}");
    assert!(report.lines().count() > 1, "report must contain sample rows");
}

#[test]
fn sweep_honors_the_eps_override() {
    let (_scratch, cfg, out_dir) = setup(|_| {});
    let out = mnl(&["sweep", "--config", cfg.to_str().unwrap(), "--eps", "0,1"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let report = fs::read_to_string(out_dir.join("sweep.csv")).expect("sweep.csv");
    let mut degrees: Vec<&str> = report
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).expect("eps column"))
        .collect();
    degrees.sort_unstable();
    degrees.dedup();
    assert_eq!(degrees, vec!["0", "1"], "sweep must cover exactly the requested degrees");
    assert!(out_dir.join("sweep.json").exists());
}

#[test]
fn gradcheck_reports_both_levels_and_exits_cleanly() {
    let (_scratch, cfg, out_dir) = setup(|_| {});
    let out = mnl(&["gradcheck", "--config", cfg.to_str().unwrap(), "--configs", "5"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("gradcheck.json")).unwrap())
            .expect("gradcheck.json");
    for level in ["logits", "params"] {
        let max = report[level]["max_rel_error"].as_f64().expect("error field");
        let tol = report[level]["tolerance"].as_f64().expect("tolerance field");
        assert!(max < tol, "{level}: {max} not under {tol}");
    }
}

#[test]
fn overhead_needs_enough_iterations() {
    let (_scratch, cfg, _out) = setup(|_| {});
    let out = mnl(&["overhead", "--config", cfg.to_str().unwrap(), "--iterations", "50"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("iterations"), "stderr: {}", stderr(&out));
}
