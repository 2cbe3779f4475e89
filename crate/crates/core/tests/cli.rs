use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aggnoise"));
    for (k, _) in std::env::vars() {
        if k.starts_with("AGGNOISE_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    let pat = format!("{key}=");
    let start = text.find(&pat).unwrap_or_else(|| panic!("{key} missing in {text}")) + pat.len();
    text[start..].split_whitespace().next().unwrap().parse().unwrap()
}

fn small_config(rounds: u64, mechanism: &str, route: Value) -> Value {
    json!({
        "simulation": {
            "seed": 11,
            "family": "linear_regression",
            "dataset": {"kind": "synthetic", "features": 3, "per_user": 40, "noise": 0.1, "eval_size": 100},
            "sensitive_users": 1,
            "non_sensitive_users": 4,
            "clip": 1.0,
            "rounds": rounds,
            "scheme": {"kind": "gaussian_sampled", "batch": 10, "learning_rate": 0.1},
            "mechanism": mechanism,
            "sigma2": 0.01,
            "accountant": {"route": route, "delta": 1e-5, "composition": "simple"}
        }
    })
}

fn write_config(dir: &Path, v: &Value) -> String {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn account_closed_form_wine_round() {
    let o = run(&["account", "--route", "closed", "--lambda", "0.25", "--C", "2", "--B", "100", "--delta", "1e-3"]);
    assert!(o.status.success());
    assert!((field(&stdout(&o), "round_epsilon") - 0.3021).abs() < 1e-4);
}

#[test]
fn account_wfdp_optimum() {
    let o = run(&[
        "account", "--route", "wfdp-a", "--C", "1", "--B", "10", "--D", "100", "--N", "50", "--sigma", "0.1", "--delta",
        "1e-5",
    ]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!((field(&s, "round_epsilon") - 1.062).abs() < 1e-3);
    assert!((field(&s, "alpha") - 16.5).abs() < 0.1);
}

#[test]
fn account_refuses_empty_interval() {
    let o = run(&[
        "account", "--route", "wfdp-a", "--C", "1", "--B", "10", "--D", "100", "--N", "2", "--sigma", "0.1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty α validity interval"));
}

#[test]
fn account_names_bad_parameter() {
    let o = run(&["account", "--route", "closed", "--lambda", "0.25", "--delta", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config(2, "none", json!({"route": "closed_form", "variant": "general"}));
    v["simulation"]["learning_rat"] = json!(0.1);
    let cfg = write_config(dir.path(), &v);
    let o = run(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &small_config(5, "wfdp", json!({"route": "closed_form", "variant": "general"})),
    );
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = run(&["--config", &cfg, "--out", out.to_str().unwrap(), "simulate"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(
            ["metrics.csv", "ledger.json", "manifest.json"]
                .map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
    let header = String::from_utf8(outputs[0][0].clone()).unwrap();
    assert!(header.starts_with("round,train_loss,eval_metric,lambda_min,eps_round,eps_cumulative,noise_trace\n"));
    // A different seed on the command line wins over the file.
    let out = dir.path().join("seeded");
    assert!(run(&["--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "12", "simulate"]).status.success());
    assert_ne!(fs::read(out.join("metrics.csv")).unwrap(), outputs[0][0]);
}

#[test]
fn singular_aggregate_without_mechanism_is_infinite() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config(2, "none", json!({"route": "closed_form", "variant": "general"}));
    v["simulation"]["dataset"] = json!({"kind": "synthetic", "features": 10, "per_user": 3, "noise": 0.1, "eval_size": 50});
    v["simulation"]["non_sensitive_users"] = json!(2);
    v["simulation"]["scheme"]["batch"] = json!(3);
    let cfg = write_config(dir.path(), &v);
    let o = run(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "simulate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ledger: Value = serde_json::from_slice(&fs::read(dir.path().join("ledger.json")).unwrap()).unwrap();
    for e in ledger["entries"].as_array().unwrap() {
        assert_eq!(e["bound"]["kind"], "infinite");
        assert!(e["bound"]["cause"].as_str().unwrap().starts_with("VIOLATED"));
    }
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().contains("inf"));
}

#[test]
fn compose_of_split_ledger_matches_whole() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &small_config(50, "wfdp", json!({"route": "closed_form", "variant": "general"})),
    );
    let out = dir.path().join("whole");
    assert!(run(&["--config", &cfg, "--out", out.to_str().unwrap(), "simulate"]).status.success());
    let whole: Value = serde_json::from_slice(&fs::read(out.join("ledger.json")).unwrap()).unwrap();
    let entries = whole["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 50);
    let mut paths = Vec::new();
    for (k, part) in entries.chunks(25).enumerate() {
        let mut doc = whole.clone();
        doc["entries"] = Value::Array(part.to_vec());
        let p = dir.path().join(format!("part{k}.json"));
        fs::write(&p, serde_json::to_string(&doc).unwrap()).unwrap();
        paths.push(p.to_string_lossy().into_owned());
    }
    let o = run(&["--out", dir.path().to_str().unwrap(), "compose", "--mode", "simple", &paths[0], &paths[1]]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let total = field(&stdout(&o), "total_epsilon");
    let expected = whole["total_epsilon"].as_f64().unwrap();
    assert!((total - expected).abs() <= 1e-12 * expected);
    let merged: Value = serde_json::from_slice(&fs::read(dir.path().join("composed_ledger.json")).unwrap()).unwrap();
    assert_eq!(merged["entries"][49]["round"], 50);
}

#[test]
fn spectrum_flooring_demo() {
    let o = run(&["spectrum"]);
    assert!(o.status.success());
    let mut rdr = csv::Reader::from_reader(o.stdout.as_slice());
    assert_eq!(rdr.headers().unwrap(), vec!["index", "eigenvalue", "floored", "delta"]);
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|x| x.parse().unwrap()).collect())
        .collect();
    let expect = [[0.0, 0.5, 0.5, 0.0], [1.0, 0.02, 0.04, 0.02], [2.0, 0.0, 0.04, 0.04]];
    for (r, e) in rows.iter().zip(expect) {
        for (a, b) in r.iter().zip(e) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn spectrum_from_config_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &small_config(1, "wfdp", json!({"route": "closed_form", "variant": "general"})),
    );
    let o = run(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "spectrum"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = fs::read_to_string(dir.path().join("spectrum_aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 4);
    assert!(dir.path().join("spectrum_user_0.csv").exists());
}

#[test]
fn verify_small_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "--out",
        dir.path().to_str().unwrap(),
        "verify",
        "--closed-trials",
        "100",
        "--rdp-trials",
        "50",
        "--distinguisher-trials",
        "20000",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["suites"].as_array().unwrap().len(), 5);
}

#[test]
fn environment_seed_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &small_config(2, "none", json!({"route": "closed_form", "variant": "general"})),
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "99", "simulate"]).status.success());
    let o = bin()
        .env("AGGNOISE_SEED", "99")
        .args(["--config", &cfg, "--out", b.to_str().unwrap(), "simulate"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}
