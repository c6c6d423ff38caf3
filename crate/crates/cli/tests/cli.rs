use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY_GEN: &str = r#"{
  "m_x": 2, "m_y": 2, "users": 2, "rf_chains": 2, "filter_steps": 4,
  "sinr_db": [5.0, 10.0], "count": 30,
  "groups": [{"side_info": [10.0, 10.0]}, {"side_info": [24.0, 24.0]}]
}"#;

const TINY_RUN: &str = r#"{
  "model": {"variant": "gcn", "rf_chains": 2, "greedy_steps": 2},
  "max_steps": 4, "batch_size": 6, "val_interval": 2, "folds": 3
}"#;

fn hbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hbf")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn gen(dir: &Path, name: &str, seed: &str) -> String {
    let cfg = write(dir, "gen.json", TINY_GEN);
    let out = dir.join(name);
    let out = out.to_str().unwrap();
    let o = hbf(&["gen", "--config", &cfg, "--seed", seed, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.to_owned()
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", "5");
    let b = gen(dir.path(), "b", "5");
    let c = gen(dir.path(), "c", "6");
    let t = |d: &str| digest(&Path::new(d).join("tensors.bin"));
    assert_eq!(t(&a), t(&b));
    assert_ne!(t(&a), t(&c));
}

#[test]
fn train_then_eval_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", "1");
    let run = write(dir.path(), "run.json", TINY_RUN);
    let ckpt = dir.path().join("m.ckpt");
    let hist = dir.path().join("h.csv");
    let o = hbf(&[
        "train",
        "--config",
        &run,
        "--data",
        &data,
        "--fold",
        "1",
        "--seed",
        "3",
        "--out",
        ckpt.to_str().unwrap(),
        "--csv",
        hist.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&hist).unwrap().starts_with("step,loss,g_0,g_1,"));

    let csv = dir.path().join("eval.csv");
    let o = hbf(&[
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--data",
        &data,
        "--fold",
        "1",
        "--config",
        &run,
        "--csv",
        csv.to_str().unwrap(),
        "--method",
        "gcn",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,fold,group,mean_power,outage_pct,n,infeasible"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("u_gcn,1,all,"));

    // a checkpoint of another variant is a validation error
    let o = hbf(&["eval", "--model", ckpt.to_str().unwrap(), "--data", &data, "--method", "fcn"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bench_reports_both_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", "2");
    let run = write(dir.path(), "run.json", TINY_RUN);
    let o = hbf(&["bench", "--data", &data, "--config", &run, "--fold", "0", "--tol", "0.05"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().any(|l| l.starts_with("ghbf_perf,0,all,")));
    assert!(out.lines().any(|l| l.starts_with("ghbf_marg,0,all,")));
}

#[test]
fn gradcheck_succeeds() {
    let o = hbf(&["gradcheck", "--seed", "4", "--count", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_failure_is_numerical() {
    let o = hbf(&["gradcheck", "--seed", "4", "--count", "2", "--tol", "1e-30"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_flag_prints_usage() {
    let o = hbf(&["gen", "--bogus", "1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"users": 0}"#);
    let o = hbf(&["gen", "--config", &bad, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let garbled = write(dir.path(), "garbled.json", "{ not json");
    let o = hbf(&["gen", "--config", &garbled, "--out", dir.path().join("y").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let o = hbf(&["bench", "--data", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}
