use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robust-sysid")).args(args).output().expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> String {
    let out = path(dir, name);
    let mut args = vec!["simulate", "--order", "30", "--seed", "7", "-o", &out];
    if !extra.contains(&"--N") {
        args.extend_from_slice(&["--N", "200"]);
    }
    if !extra.contains(&"--outlier-prob") {
        args.extend_from_slice(&["--outlier-prob", "0.1"]);
    }
    args.extend_from_slice(extra);
    let res = bin(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    out
}

fn json(path: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_dataset_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let truth = path(dir.path(), "truth.json");
    let data = simulate(dir.path(), "data.csv", &["--truth", &truth]);
    let text = fs::read_to_string(&data).unwrap();
    assert!(text.starts_with("u,y\n"));
    assert_eq!(text.lines().count(), 201);
    let t = json(&truth);
    assert_eq!(t["g"].as_array().unwrap().len(), 50);
    assert!(t["sigma2"].as_f64().unwrap() > 0.0);
    assert_eq!(t["seed"], 7);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = path(dir.path(), "t1.json");
    let t2 = path(dir.path(), "t2.json");
    let a = simulate(dir.path(), "a.csv", &["--truth", &t1]);
    let b = simulate(dir.path(), "b.csv", &["--truth", &t2]);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    assert_eq!(fs::read(t1).unwrap(), fs::read(t2).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "x.csv");
    let res = bin(&["simulate", "--order", "0", "-o", &out]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("order"));

    assert_eq!(bin(&["simulate", "--seed", "1", "-o", "/nonexistent/dir/x.csv"]).status.code(), Some(2));
    assert_eq!(bin(&["bench", "--methods", "em-x"]).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));

    let bad = path(dir.path(), "bad.csv");
    fs::write(&bad, "u,y\n1,2\n3\n").unwrap();
    assert_eq!(bin(&["identify", "--input", &bad]).status.code(), Some(2));
    fs::write(&bad, "a,b\n1,2\n").unwrap();
    assert_eq!(bin(&["identify", "--input", &bad]).status.code(), Some(2));
}

#[test]
fn identify_student_auto_converges() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "data.csv", &[]);
    let est = path(dir.path(), "est.json");
    let res = bin(&["identify", "--input", &data, "--noise", "student-auto", "--n", "50", "-o", &est]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let v = json(&est);
    for key in ["g", "lower99", "upper99", "lambda", "beta", "tau", "nu", "iterations", "converged", "objective_trace"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["converged"], true);
    assert_eq!(v["g"].as_array().unwrap().len(), 50);
    assert_eq!(v["tau"].as_array().unwrap().len(), 200);
    let (g, lo, hi) = (v["g"].as_array().unwrap(), v["lower99"].as_array().unwrap(), v["upper99"].as_array().unwrap());
    for i in 0..50 {
        assert!(lo[i].as_f64().unwrap() <= g[i].as_f64().unwrap() && g[i].as_f64().unwrap() <= hi[i].as_f64().unwrap());
    }
}

#[test]
fn identify_gaussian_pins_tau() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "data.csv", &[]);
    let est = path(dir.path(), "est.json");
    let res = bin(&["identify", "--input", &data, "--noise", "gaussian", "--sigma2", "0.25", "-o", &est]);
    assert!(res.status.success());
    let v = json(&est);
    assert!(v["tau"].as_array().unwrap().iter().all(|t| t.as_f64() == Some(0.25)));
    assert!(v["nu"].is_null());
}

#[test]
fn identify_single_group_on_gaussian_data() {
    let dir = tempfile::tempdir().unwrap();
    let truth = path(dir.path(), "truth.json");
    // large N keeps the sample variance of the noise itself well inside the tolerance
    let data = simulate(dir.path(), "data.csv", &["--N", "1000", "--outlier-prob", "0", "--truth", &truth]);
    let sigma2 = json(&truth)["sigma2"].as_f64().unwrap();
    let est = path(dir.path(), "est.json");
    let s = sigma2.to_string();
    let res = bin(&["identify", "--input", &data, "--noise", "laplace", "--groups", "1", "--sigma2", &s, "-o", &est]);
    assert!(res.status.success());
    let tau = json(&est)["tau"].as_array().unwrap().clone();
    assert_eq!(tau.len(), 1);
    let rel = (tau[0].as_f64().unwrap() - sigma2).abs() / sigma2;
    assert!(rel <= 0.15, "relative error {rel}");
}

#[test]
fn student_requires_nu() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "data.csv", &[]);
    assert_eq!(bin(&["identify", "--input", &data, "--noise", "student"]).status.code(), Some(2));
    assert_eq!(bin(&["identify", "--input", &data, "--noise", "laplace", "--nu", "4"]).status.code(), Some(2));
    let res = bin(&["identify", "--input", &data, "--noise", "student", "--nu", "inf", "--max-iter", "3"]);
    assert!(res.status.success());
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["nu"], "inf");
}

#[test]
fn bench_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let report = path(dir.path(), &format!("r{tag}.csv"));
        let summary = path(dir.path(), &format!("s{tag}.json"));
        let res = bin(&[
            "bench", "--runs", "4", "--N", "80", "--n", "15", "--order", "6", "--outlier-prob", "0.1",
            "--methods", "em-s,em-l,ss-ml", "--seed", "1", "--no-timing", "--report", &report, "--summary", &summary,
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        (report, summary)
    };
    let (r1, s1) = run("1");
    let (r2, s2) = run("2");
    let text = fs::read_to_string(&r1).unwrap();
    assert!(text.starts_with("run,method,fit,iterations,wall_time_s\n"));
    assert_eq!(text.lines().count(), 1 + 4 * 3);
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    let s = json(&s1);
    for m in ["em-s", "em-l", "ss-ml"] {
        for k in ["mean", "median", "ci95_halfwidth"] {
            assert!(s["methods"][m][k].is_number());
        }
    }
    let pairs = s["pairwise"].as_array().unwrap();
    assert_eq!(pairs.len(), 3);
    assert!(pairs[0]["t_stat"].is_number() && pairs[0]["p_value"].is_number());
}

#[test]
fn bench_single_method_omits_pairwise() {
    let res = bin(&["bench", "--runs", "2", "--N", "60", "--n", "10", "--order", "4", "--methods", "em-s"]);
    assert!(res.status.success());
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(v.get("pairwise").is_none());
    assert!(v["methods"]["em-s"].is_object());
}
