use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sdopf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdopf"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("SDOPF_OUT_DIR")
        .env_remove("SDOPF_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

fn data_rows(path: &Path) -> usize {
    let text = fs::read_to_string(path).unwrap();
    text.lines().count() - 1
}

const SMOKE: &str = r#"{
  "case": "ieee14",
  "trainer": {
    "algorithm": "crl",
    "iterations": 10,
    "batch_size": 4,
    "buffer_capacity": 16,
    "exploration_steps": 4,
    "dual_period": 5,
    "seed": 3,
    "net": {"hidden": 8, "gcn_features": 2, "branch_features": 2},
    "scenario": {"episode_len": 24}
  }
}"#;

#[test]
fn missing_case_file_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sdopf(tmp.path(), &["pf", "--case", "/no/such/grid.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/grid.json"), "{err}");
}

#[test]
fn malformed_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"trainer": {"gamma": 1.5}}"#);
    let out = sdopf(tmp.path(), &["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = write_config(tmp.path(), r#"{"trianer": {}}"#);
    assert_eq!(sdopf(tmp.path(), &["pf", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn smoke_training_writes_one_row_per_iteration_and_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = sdopf(dir, &["train", "--config", &cfg]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(data_rows(&a.join("metrics.csv")), 10);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("train_manifest.json")).unwrap(), fs::read(b.join("train_manifest.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("train_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["trainer"], 3);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(a.join("checkpoint/actor.json").is_file());

    // the checkpoint evaluates, and a different network shape is rejected
    let out = sdopf(&a, &["eval", "--config", &cfg, "--steps", "30"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_rows(&a.join("eval.csv")), 30);
    let other = write_config(tmp.path(), r#"{"trainer": {"net": {"hidden": 8, "gcn_features": 3}}}"#);
    let out = sdopf(&a, &["eval", "--config", &other, "--steps", "5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_reports_every_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sdopf(tmp.path(), &["eval", "--policy", "random", "--steps", "1000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("eval_summary.json")).unwrap()).unwrap();
    assert_eq!(s["samples"], 1000);
    assert_eq!(data_rows(&tmp.path().join("eval.csv")), 1000);
}

#[test]
fn env_rollout_writes_requested_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sdopf(tmp.path(), &["env-rollout", "--steps", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("rollout.csv")).unwrap();
    assert_eq!(text.lines().count(), 6);
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("t,soc_1,") && header.ends_with(",vm_14,slack_g_p"), "{header}");
}

#[test]
fn pf_prints_a_converged_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sdopf(tmp.path(), &["pf", "--case", "ieee30"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last = stdout.lines().last().unwrap();
    let mismatch: f64 = last.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(mismatch <= 1e-8, "{stdout}");
    assert_eq!(data_rows(&tmp.path().join("pf.csv")), 30);
}

#[test]
fn oracle_on_a_single_bus_dispatches_the_demand() {
    let tmp = tempfile::tempdir().unwrap();
    let case = tmp.path().join("one.json");
    fs::write(
        &case,
        r#"{"base_mva": 100, "dt_over_ecap": 1.0,
            "buses": [{"id": 1, "v_min": 0.9, "v_max": 1.1, "d_p": 1.3, "d_q": 0.2}],
            "branches": [],
            "generators": [{"bus": 1, "p_min": 0, "p_max": 3, "q_min": -1, "q_max": 1,
                            "cost_a": 2.0, "cost_b": 1.0, "cost_c": 0.5, "is_slack": true}],
            "bess": []}"#,
    )
    .unwrap();
    let out = sdopf(
        tmp.path(),
        &["oracle", "--case", case.to_str().unwrap(), "--steps", "1", "--block", "1", "--base-demand"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("oracle_summary.json")).unwrap()).unwrap();
    let want = 2.0 * 1.3 * 1.3 + 1.3 + 0.5;
    assert!((s["objective"].as_f64().unwrap() - want).abs() < 1e-5, "{s}");
    let csv = fs::read_to_string(tmp.path().join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,g_p_1,g_q_1,cost");
}

#[test]
fn gradcheck_passes_on_demand() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sdopf(tmp.path(), &["gradcheck", "--instances", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(data_rows(&tmp.path().join("gradcheck.csv")) >= 40);
}

#[test]
fn zero_threads_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sdopf(tmp.path(), &["pf", "--threads", "0"]);
    assert_eq!(out.status.code(), Some(1));
}
