use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_mwiv");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("MWIV_THREADS").output().unwrap()
}

fn json(args: &[&str]) -> Value {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

/// 120 rows in 6 groups, strong first stage, true beta = 1.
fn write_data(dir: &Path) -> PathBuf {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut s = String::from("y,x,z1,z2,z3,z4,z5,z6,w\n");
    for i in 0..120 {
        let g = i % 6;
        let v: f64 = r.sample(StandardNormal);
        let u: f64 = r.sample(StandardNormal);
        let x = 0.8 * g as f64 + v;
        let y = x + 0.5 * v + u;
        write!(s, "{y},{x}").unwrap();
        for k in 0..6 {
            write!(s, ",{}", (k == g) as u8).unwrap();
        }
        writeln!(s, ",{}", r.random::<f64>()).unwrap();
    }
    let path = dir.join("d.csv");
    fs::write(&path, s).unwrap();
    path
}

fn data_args(path: &Path) -> Vec<String> {
    ["--data", path.to_str().unwrap(), "--y", "y", "--x", "x", "--z-prefix", "z"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn with<'a>(head: &[&'a str], data: &'a [String], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(data.iter().map(String::as_str)).chain(tail.iter().copied()).collect()
}

fn check_envelope(v: &Value, sub: &str) {
    let m = &v["manifest"];
    assert_eq!(m["subcommand"], sub);
    assert!(m["options"].is_object());
    assert!(m["version"].is_string());
    assert!(m["timestamp"].is_string());
    assert!(v["result"].is_object() || v["result"].is_array(), "{sub}: {v}");
    assert!(v["warnings"].is_array());
}

#[test]
fn ar_test_reports_decision() {
    let dir = TempDir::new().unwrap();
    let d = data_args(&write_data(dir.path()));
    let v = json(&with(&["ar-test"], &d, &["--beta0", "0", "--alpha", "0.05"]));
    check_envelope(&v, "ar-test");
    let r = &v["result"];
    assert_eq!(r["decision"], "reject");
    assert!(r["statistic"].as_f64().unwrap() > 1.645);
    assert_eq!(r["method"], "crossfit");
    assert_eq!(v["manifest"]["input_sha256"].as_str().unwrap().len(), 64);

    let v = json(&with(&["ar-test"], &d, &["--beta0", "1", "--variance", "naive"]));
    assert_eq!(v["result"]["decision"], "accept");
    assert_eq!(v["result"]["method"], "naive");
}

#[test]
fn inference_subcommands_share_the_envelope() {
    let dir = TempDir::new().unwrap();
    let d = data_args(&write_data(dir.path()));
    let jive = json(&with(&["jive"], &d, &[]));
    check_envelope(&jive, "jive");
    let b = jive["result"]["betaHat"].as_f64().unwrap();
    assert!((b - 1.0).abs() < 0.5, "{b}");

    let ci = json(&with(&["ar-ci"], &d, &["--grid", "-2,4,601"]));
    check_envelope(&ci, "ar-ci");
    assert!(ci["result"]["intervals"].is_array());

    for (sub, extra) in [
        ("pretest", vec![]),
        ("twostep", vec!["--beta0", "1"]),
        ("twostep-ci", vec!["--grid", "-2,4,601"]),
        ("diagnose", vec![]),
    ] {
        let v = json(&with(&[sub], &d, &extra));
        check_envelope(&v, sub);
    }

    let listed = json(&with(&["jive"], &d[..6].to_vec(), &["--z", "z1,z2,z3,z4,z5,z6"]));
    assert_eq!(listed["result"]["betaHat"], jive["result"]["betaHat"]);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let d = data_args(&write_data(dir.path()));
    assert_eq!(run(&["ar-test"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&with(&["ar-test"], &d, &["--beta0", "0", "--alpha", "1.5"])).status.code(), Some(2));

    let missing = run(&with(&["ar-test"], &d, &["--beta0", "0", "--w", "nope"]));
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "y,x,z1\n1,2,abc\n").unwrap();
    let o = run(&["jive", "--data", bad.to_str().unwrap(), "--y", "y", "--x", "x", "--z", "z1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn rmax_near_ten_percent() {
    let v = json(&["rmax", "--s", "2.5", "--draws", "200000"]);
    check_envelope(&v, "rmax");
    let text = v["result"].to_string();
    let r = v["result"]["rmax"].as_f64().unwrap_or_else(|| panic!("{text}"));
    assert!((r - 0.10).abs() < 0.01, "{r}");
}

#[test]
fn simulation_outputs_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("s.toml");
    fs::write(
        &cfg,
        "seed = 4\nreps = 60\n[design]\nkind = \"group\"\nn = 100\nk = 20\nrho = 0.2\nfirst_stage = { type = \"dense\" }\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let args = ["study", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let a = json(&args);
    check_envelope(&a, "study");
    let b = json(&args);
    assert_eq!(a["result"], b["result"]);
    let written: Value = serde_json::from_str(&fs::read_to_string(out.join("study.json")).unwrap()).unwrap();
    assert_eq!(written["result"], a["result"]);

    let p = json(&["power", "--config", cfg.to_str().unwrap(), "--deltas", "-1,0,1", "--out", out.to_str().unwrap()]);
    check_envelope(&p, "power");
    let csv = fs::read_to_string(out.join("power.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    assert!(out.join("power.json").exists());
}
