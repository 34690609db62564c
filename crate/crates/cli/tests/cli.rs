use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ddspme_cli::read_manifest;
use ddspme_cli::manifest::RunStatus;
use serde_json::Value;
use tempfile::TempDir;

fn shipped(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// `picard_demo` shrunk so a solve takes well under a second.
fn small_demo() -> Value {
    let mut c = shipped("picard_demo.json");
    c["run"]["M"] = 32.into();
    c["run"]["n_steps"] = 200.into();
    c["run"]["T"] = 0.2.into();
    c["picard"]["flow_stride"] = 10.into();
    c
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn ddspme(task: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_ddspme"))
        .arg(task)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("DDSPME_THREADS", "2")
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn run_value(task: &str, config: &Value, extra: &[&str]) -> (TempDir, PathBuf, i32) {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), config);
    let out = tmp.path().join("out");
    let code = ddspme(task, &cfg, &out, extra);
    (tmp, out, code)
}

fn assert_no_orphans(out: &Path) {
    let manifest = read_manifest(out).unwrap();
    let mut files: Vec<String> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    files.sort();
    assert_eq!(files, manifest.outputs, "files on disk must match the manifest");
}

#[test]
fn every_shipped_config_validates() {
    for entry in fs::read_dir(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")).unwrap() {
        let path = entry.unwrap().path();
        let tmp = TempDir::new().unwrap();
        assert_eq!(ddspme("validate", &path, tmp.path(), &[]), 0, "{}", path.display());
        let report = read_json(&tmp.path().join("validation.json"));
        assert_eq!(report["valid"], true);
    }
}

#[test]
fn alpha_out_of_range_is_a_schema_error() {
    let mut c = small_demo();
    c["operator"]["alpha"] = 1.5.into();
    let (_tmp, out, code) = run_value("validate", &c, &[]);
    assert_eq!(code, 2);
    let report = read_json(&out.join("validation.json"));
    let text = report["violations"].to_string();
    assert!(text.contains("operator.alpha") && text.contains("1.5"), "{text}");

    let (_tmp, out, code) = run_value("solve", &c, &[]);
    assert_eq!(code, 2);
    let err = read_json(&out.join("error.json"));
    assert_eq!(err["exit_code"], 2);
    assert_no_orphans(&out);
}

#[test]
fn step_size_above_stability_bound_is_reported_with_value() {
    let mut c = small_demo();
    c["run"]["n_steps"] = 1.into();
    c["run"]["T"] = 10.0.into();
    c["run"]["eps"] = 50.0.into();
    let (_tmp, out, code) = run_value("validate", &c, &[]);
    assert_eq!(code, 2);
    let report = read_json(&out.join("validation.json"));
    let bound = report["explicit_dt_bound"].as_f64().unwrap();
    let text = report["violations"].to_string();
    assert!(text.contains("dt = 10") && text.contains(&format!("{bound}")), "{text}");
}

#[test]
fn unknown_keys_are_rejected() {
    let mut c = small_demo();
    c["run"]["particles_typo"] = 3.into();
    let (_tmp, out, code) = run_value("solve", &c, &[]);
    assert_eq!(code, 2);
    let err = read_json(&out.join("error.json"));
    assert!(err.to_string().contains("particles_typo"), "{err}");
    let manifest = read_manifest(&out).unwrap();
    assert_eq!(manifest.status, RunStatus::Failed);
    assert_eq!(manifest.exit_code, Some(2));
}

#[test]
fn picard_budget_exhaustion_exits_with_numerical_code() {
    let mut c = small_demo();
    c["picard"]["max_iter"] = 1.into();
    c["picard"]["tol"] = 1e-300.into();
    let (_tmp, out, code) = run_value("solve", &c, &[]);
    assert_eq!(code, 3);
    assert_eq!(read_json(&out.join("error.json"))["exit_code"], 3);
    assert_no_orphans(&out);
}

#[test]
fn strict_probe_failure_exits_with_code_4() {
    let mut c = small_demo();
    c["model"]["constants"]["K2"] = 0.01.into();
    let (_tmp, out, code) = run_value("probe-assumptions", &c, &[]);
    assert_eq!(code, 0, "without --strict failures are only reported");
    let probes = read_json(&out.join("probes.json"));
    assert!(probes.as_array().unwrap().iter().any(|r| r["worst_violation"].as_f64().unwrap() > 0.0));

    let (_tmp, out, code) = run_value("probe-assumptions", &c, &["--strict"]);
    assert_eq!(code, 4);
    assert!(read_json(&out.join("error.json")).to_string().contains("A4Growth"));
    assert_no_orphans(&out);
}

#[test]
fn identity_probe_estimates_unit_constant() {
    let tmp = TempDir::new().unwrap();
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/probe_identity.json");
    assert_eq!(ddspme("probe-assumptions", &cfg, tmp.path(), &["--strict"]), 0);
    let probes = read_json(&tmp.path().join("probes.json"));
    let a1 = probes
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["hypothesis"] == "a1_diagonal")
        .unwrap();
    let estimate = a1["estimated_constant"].as_f64().unwrap();
    assert!((estimate - 1.0).abs() < 1e-3, "{estimate}");
}

#[test]
fn solve_is_deterministic_and_manifest_is_complete() {
    let c = small_demo();
    let (_a, out_a, code_a) = run_value("solve", &c, &[]);
    let (_b, out_b, code_b) = run_value("solve", &c, &["--threads", "1"]);
    assert_eq!((code_a, code_b), (0, 0));
    let (ma, mb) = (read_manifest(&out_a).unwrap(), read_manifest(&out_b).unwrap());
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.status, RunStatus::Ok);
    assert_eq!(ma.seeds, mb.seeds);
    for name in ["trajectory.bin", "stats.csv", "picard.csv"] {
        assert_eq!(fs::read(out_a.join(name)).unwrap(), fs::read(out_b.join(name)).unwrap(), "{name}");
    }
    assert_no_orphans(&out_a);
}

#[test]
fn config_hash_ignores_output_but_tracks_parameters() {
    let c = small_demo();
    let mut moved = c.clone();
    moved["output"] = "elsewhere".into();
    let mut reseeded = c.clone();
    reseeded["run"]["seed"] = 1.into();
    let hash = |v: &Value| {
        let (_t, out, code) = run_value("validate", v, &[]);
        assert_eq!(code, 0);
        read_manifest(&out).unwrap().config_hash
    };
    assert_eq!(hash(&c), hash(&moved));
    assert_ne!(hash(&c), hash(&reseeded));
}

#[test]
fn oracle_ot_lists_every_method() {
    let mut c = small_demo();
    c["run"]["M"] = 6.into();
    let (_tmp, out, code) = run_value("oracle-ot", &c, &[]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join("ot.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    let exact: f64 = rows[0][2].parse().unwrap();
    let brute: f64 = rows[1][2].parse().unwrap();
    assert_eq!(rows[1][0], "permutation");
    assert!((exact - brute).abs() < 1e-12);
    assert_no_orphans(&out);
}

#[test]
fn lambda_sweep_slope_is_near_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/sweep_lambda.json");
    assert_eq!(ddspme("sweep-lambda", &cfg, tmp.path(), &[]), 0);
    let summary = read_json(&tmp.path().join("sweep_lambda_summary.json"));
    let slope = summary["slope"].as_f64().unwrap();
    assert!((0.7..=1.3).contains(&slope), "{slope}");
    assert_no_orphans(tmp.path());
}
