use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "world": { "n_identities": 60 },
  "experts": [
    { "role": "ensemble", "embedding_dim": 32, "epochs": 10 },
    { "role": "ensemble", "embedding_dim": 32, "epochs": 10 },
    { "role": "heldout", "embedding_dim": 32, "epochs": 10 },
    { "role": "utility", "embedding_dim": 4, "epochs": 10 }
  ],
  "weights": { "lambda_uti": [2.0] },
  "merge": { "steps": 200 },
  "phases": { "phase1_steps": 30, "phase2_steps": 30, "obfuscator_pretrain_steps": 20 },
  "eval": { "n_impostor": 2000, "sensitivity_pairs": 2000, "attacker": { "epochs": 2 } },
  "master_seed": 4
}"#;

fn deid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deid")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn world_gen_writes_configured_sample_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("w");
    let o = deid(&["world-gen", "--config", &cfg, "--out", s(&out), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let text = fs::read_to_string(out.join("world.txt")).unwrap();
    let samples = text.lines().find_map(|l| l.strip_prefix("samples ")).unwrap();
    assert_eq!(samples, "600");
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["master_seed"], 4);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(deid(&["world-gen", "--config", &cfg, "--out", s(&a), "--quiet"]).status.success());
    assert!(deid(&["world-gen", "--config", &cfg, "--out", s(&b), "--seed", "9", "--quiet"]).status.success());
    assert_ne!(fs::read(a.join("world.txt")).unwrap(), fs::read(b.join("world.txt")).unwrap());
    let meta: Value = serde_json::from_str(&fs::read_to_string(b.join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["master_seed"], 9);
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(deid(&["frobnicate"]).status.code(), Some(64));
    let o = deid(&["world-gen", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(64));
    assert_eq!(error_json(&o)["error"], "usage");
    assert_eq!(deid(&["sweep", "--param", "gamma", "--values", "1"]).status.code(), Some(64));
    assert_eq!(deid(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "weights": { "lamda_id": 3.0 } }"#).unwrap();
    let out = dir.path().join("o");
    let o = deid(&["world-gen", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = error_json(&o);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("lamda_id"));
    assert!(!out.exists(), "nothing is written on a config error");

    let o = Command::new(env!("CARGO_BIN_EXE_deid"))
        .args(["world-gen", "--out", s(&out)])
        .env("DEID_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let o = deid(&["eval", "--bundle", s(&dir.path().join("none")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(error_json(&o)["error"], "io");
    let o = deid(&["world-gen", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn audit_of_laplace_mechanism() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = deid(&["audit-ldp", "--out", s(&out), "--samples", "200000", "--bins", "50", "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("audit.json")).unwrap()).unwrap();
    assert_eq!(v["audit"]["passed"], true);
    let o = deid(&["audit-ldp", "--out", s(&out), "--samples", "10"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_eval_attack_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let bundle = dir.path().join("bundle");
    let o = deid(&["train", "--config", &cfg, "--out", s(&bundle), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bundle_before = fs::read(bundle.join("swap.ckpt")).unwrap();

    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for e in [&e1, &e2] {
        let o = deid(&["eval", "--bundle", s(&bundle), "--out", s(e), "--quiet"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["report.json", "report.csv"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(e1.join("report.json")).unwrap()).unwrap();
    let manifest: Value = serde_json::from_str(&fs::read_to_string(bundle.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"], manifest["config_hash"]);
    assert!(fs::read_to_string(e1.join("report.csv")).unwrap().starts_with("# config_hash "));

    let a = dir.path().join("attack");
    let o = deid(&["attack", "--bundle", s(&bundle), "--out", s(&a), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let inv: Value = serde_json::from_str(&fs::read_to_string(a.join("inversion.json")).unwrap()).unwrap();
    assert!(inv["average"]["tpr_at_fpr"].is_number());

    let au = dir.path().join("audit");
    let o = deid(&["audit-ldp", "--bundle", s(&bundle), "--out", s(&au), "--samples", "100000", "--bins", "20", "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // A different master seed means a different world than the bundle's.
    let o = deid(&["eval", "--bundle", s(&bundle), "--out", s(&e1), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(3));
    // Writing into the bundle itself is refused.
    let o = deid(&["eval", "--bundle", s(&bundle), "--out", s(&bundle)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read(bundle.join("swap.ckpt")).unwrap(), bundle_before);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("sweep");
    let o = deid(&["sweep", "--config", &cfg, "--out", s(&out), "--param", "alpha", "--values", "1,2,3", "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("sweep_alpha.csv")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("param"));
    assert!(rows[1..].iter().all(|r| r.starts_with("alpha")));
}
