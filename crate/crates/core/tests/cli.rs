use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_gedi");

fn gedi(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("GEDI_LOG", "off").output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = gedi(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_kind(args: &[&str]) -> String {
    let out = gedi(args);
    assert_eq!(out.status.code(), Some(1), "{args:?} should fail");
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(v["schema"], 1);
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, rows: &str) -> String {
    let path = dir.join("synth.csv");
    ok_json(&["synth", "--rows", rows, "--seed", "4", "--out", s(&path)]);
    path.display().to_string()
}

const TOY: &str = "sex,age,income\n0,31,1\n1,45,0\n0,28,0\n1,52,1\n";

#[test]
fn toy_binary_audit_matches_group_gap() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.csv");
    std::fs::write(&path, TOY).unwrap();
    let v = ok_json(&["audit", "--data", s(&path), "--protected", "sex", "--target", "income"]);
    assert_eq!(v["dataset"]["task"], "classification");
    assert_eq!(v["dataset"]["rows"], 4);
    // incomes: sex 0 -> {1, 0}, sex 1 -> {0, 1}; both groups average 1/2
    assert!(v["indicators"]["gedi"].as_f64().unwrap() < 1e-12);

    let reg = "sex,age,income\n0,31,10\n1,45,7\n0,28,4\n1,52,13\n";
    std::fs::write(&path, reg).unwrap();
    let v = ok_json(&["audit", "--data", s(&path), "--protected", "sex", "--target", "income", "--kernel", "poly:1"]);
    // group means 7 and 10
    let gedi = v["indicators"]["gedi"].as_f64().unwrap();
    assert!((gedi - 3.0).abs() < 1e-12);
    assert!((v["indicators"]["didi"].as_f64().unwrap() - gedi).abs() < 1e-12);
}

#[test]
fn audit_of_original_is_one_hundred_percent() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "300");
    let v = ok_json(&["audit", "--data", &data, "--protected", "x", "--target", "y", "--kernel", "poly:3"]);
    let pct = &v["percentages"];
    assert_eq!(pct["gedi"], 100.0);
    assert_eq!(pct["gedi_v1"], 100.0);
    for (_, p) in pct["didi_binned"].as_object().unwrap() {
        assert_eq!(*p, 100.0);
    }
    assert_eq!(v["diagnostics"]["rank"], 3);
}

#[test]
fn preprocess_output_passes_re_audit() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "400");
    let out = dir.path().join("pre");
    let v = ok_json(&[
        "preprocess", "--data", &data, "--protected", "x", "--target", "y", "--constraint", "coarse:0.2", "--relative",
        "--out", s(&out),
    ]);
    assert_eq!(v["satisfied"], true);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(out.join("preprocess.json")).unwrap()).unwrap();
    assert_eq!(written, v);

    let adjusted = out.join("adjusted.csv");
    let audit = ok_json(&[
        "audit", "--data", s(&adjusted), "--protected", "x", "--target", "y_adjusted", "--reference-target", "y",
    ]);
    let pct = audit["percentages"]["gedi_v1"].as_f64().unwrap();
    assert!(pct <= 20.0 + 1e-4, "{pct}");
}

#[test]
fn bare_constraint_takes_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "200");
    let base = ["preprocess", "--data", &data, "--protected", "x", "--target", "y", "--kernel", "poly:3"];
    let with = |extra: &[&'static str]| -> Vec<&str> { base.iter().chain(extra).copied().collect() };
    let v = ok_json(&with(&["--constraint", "fine", "--threshold", "0.1"]));
    assert_eq!(v["constraint"], "fine:0.1,0,0");
    assert_eq!(err_kind(&with(&["--constraint", "fine"])), "InvalidSpec");
    assert_eq!(err_kind(&with(&["--constraint", "coarse:0.1", "--threshold", "0.1"])), "InvalidSpec");
}

#[test]
fn classification_preprocess_reports_hamming() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.csv");
    let mut csv = String::from("group,score,label\n");
    for i in 0..120 {
        let g = i % 3;
        let label = if (i * 7 + g * 5) % 10 < 3 + 2 * g { "yes" } else { "no" };
        csv.push_str(&format!("g{g},{},{label}\n", (i * 13) % 17));
    }
    std::fs::write(&path, csv).unwrap();
    let v = ok_json(&[
        "preprocess", "--data", s(&path), "--protected", "group", "--target", "label", "--constraint", "coarse:0.2",
        "--relative",
    ]);
    assert_eq!(v["dataset"]["task"], "classification");
    assert!(v["hamming"].as_u64().unwrap() > 0);
    assert!(v["after"]["gedi"].as_f64().unwrap() < v["before"]["gedi"].as_f64().unwrap());
}

#[test]
fn train_reports_traces_and_is_job_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "250");
    let args = |method: &'static str, jobs: &'static str| {
        vec![
            "train", "--data", &data, "--protected", "x", "--target", "y", "--constraint", "coarse:0.2", "--relative",
            "--method", method, "--learner", "ridge", "--iterations", "10", "--epochs", "100", "--jobs", jobs,
        ]
    };
    let sequential = gedi(&args("mt", "1"));
    let parallel = gedi(&args("mt", "5"));
    assert!(sequential.status.success());
    assert_eq!(sequential.stdout, parallel.stdout);

    let mt: Value = serde_json::from_slice(&sequential.stdout).unwrap();
    let folds = mt["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 5);
    for f in folds {
        let trace = f["trace"].as_array().unwrap();
        assert_eq!(trace.len(), 11);
        assert!(trace.iter().all(|s| s["master_violation"].as_f64().unwrap() <= 1e-6));
    }

    let sbr = ok_json(&args("sbr", "2"));
    for f in sbr["folds"].as_array().unwrap() {
        let lambdas: Vec<f64> = f["trace"].as_array().unwrap().iter().map(|s| s["lambda"][0].as_f64().unwrap()).collect();
        assert_eq!(lambdas.len(), 100);
        assert!(lambdas.windows(2).all(|w| w[1] >= w[0]));
        assert!(f["converged"].is_boolean());
    }
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.csv");
    std::fs::write(&path, TOY).unwrap();
    let p = s(&path);
    assert_eq!(err_kind(&["audit", "--data", p, "--protected", "sex", "--target", "salary"]), "MissingColumn");
    assert_eq!(err_kind(&["audit", "--data", p, "--protected", "sex", "--target", "income", "--kernel", "poly:2"]), "RankDeficientKernel");
    assert_eq!(err_kind(&["audit", "--data", s(&dir.path().join("nope.csv")), "--protected", "a", "--target", "b"]), "Io");
    assert_eq!(
        err_kind(&["train", "--data", p, "--protected", "sex", "--target", "income", "--constraint", "coarse:0.1"]),
        "TooFewRows"
    );
    assert_eq!(err_kind(&["synth", "--rows", "5", "--out", s(&dir.path().join("s.csv"))]), "InvalidSpec");
}

#[test]
fn timings_are_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "100");
    let base = ["preprocess", "--data", &data, "--protected", "x", "--target", "y", "--constraint", "exclusive:0.1"];
    assert!(ok_json(&base).get("wall_time_ms").is_none());
    assert!(ok_json(&[&base[..], &["--timings"]].concat())["wall_time_ms"].as_f64().unwrap() >= 0.0);
}
