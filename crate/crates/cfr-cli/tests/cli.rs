//! End-to-end checks of the command line: workflows, output formats,
//! and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn cfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfr")).args(args).output().expect("spawn cfr")
}

fn gen_small(dir: &Path) {
    let out = cfr(&[
        "gen-synth",
        "--objects",
        "5",
        "--attrs",
        "3",
        "--train-n",
        "80",
        "--val-n",
        "20",
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_synth_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    for f in ["train.jsonl", "val.jsonl", "embeddings.txt", "answers.txt", "stopwords.txt"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
}

#[test]
fn train_eval_explain_workflow() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let data = dir.path().to_str().unwrap().to_string();
    let ckpt = dir.path().join("model.cfrc");
    let hist = dir.path().join("history.csv");

    let out = cfr(&[
        "train",
        "--data",
        &data,
        "--out",
        ckpt.to_str().unwrap(),
        "--history",
        hist.to_str().unwrap(),
        "--epochs",
        "2",
        "--dim",
        "8",
        "--min-freq",
        "0",
        "--seed",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    let history = std::fs::read_to_string(&hist).unwrap();
    assert!(history.starts_with("epoch,loss,val_acc"));
    assert_eq!(history.lines().count(), 3);

    let out = cfr(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        &data,
        "--min-freq",
        "0",
    ]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("eval prints JSON");
    let acc = report["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // explain the first validation sample
    let out = cfr(&[
        "explain",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        &data,
        "--id",
        "val-0",
        "--min-freq",
        "0",
        "--csv",
        dir.path().join("explain.csv").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["id"], "val-0");
    let top_k = report["top_k"].as_array().unwrap();
    assert!(!top_k.is_empty() && top_k.len() <= 5);
    let confidence_sum: f64 =
        top_k.iter().map(|t| t["confidence"].as_f64().unwrap()).sum();
    assert!(confidence_sum <= 1.0 + 1e-9);
    assert!(report["psi_hat_image"].as_array().is_some());
    assert!(report["psi_hat_question"].as_array().is_some());
    assert!(report["A_cg"].as_array().is_some());
    assert!(report["A_fg"].as_array().is_some());
    assert!(report["adaptive"].as_object().is_some());
    assert!(dir.path().join("explain.csv").exists());
}

#[test]
fn ablate_reports_three_modes() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let out = cfr(&[
        "ablate",
        "--data",
        dir.path().to_str().unwrap(),
        "--epochs",
        "1",
        "--dim",
        "8",
        "--min-freq",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = report.as_array().unwrap();
    let modes: Vec<&str> =
        rows.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["coarse_only", "fine_only", "full"]);
}

#[test]
fn gradcheck_command_passes() {
    let out = cfr(&["gradcheck", "--samples", "2", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gradcheck PASS"));
}

#[test]
fn exit_codes_follow_contract() {
    // unknown flag -> usage error
    let out = cfr(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));

    // missing data directory -> data error
    let out = cfr(&["train", "--data", "/nonexistent-dir", "--out", "/tmp/x.cfrc"]);
    assert_eq!(out.status.code(), Some(2));

    // malformed dataset -> data error with line number
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    std::fs::write(dir.path().join("train.jsonl"), "not json\n").unwrap();
    let out = cfr(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("m.cfrc").to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn eval_supports_multiple_choice_sets() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let data = dir.path().to_str().unwrap().to_string();
    let ckpt = dir.path().join("model.cfrc");
    let out = cfr(&[
        "train", "--data", &data, "--out", ckpt.to_str().unwrap(), "--epochs", "1",
        "--dim", "8", "--min-freq", "0",
    ]);
    assert!(out.status.success());

    // rewrite the validation split as multiple-choice
    let val = std::fs::read_to_string(dir.path().join("val.jsonl")).unwrap();
    let mc: String = val
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let answer = v["answer"].as_u64().unwrap();
            let other = (answer + 1) % 3;
            v.as_object_mut().unwrap().remove("answer");
            v["candidates"] = serde_json::json!([answer, other]);
            v["gold"] = serde_json::json!(0);
            format!("{v}\n")
        })
        .collect();
    std::fs::write(dir.path().join("val.jsonl"), mc).unwrap();

    let out = cfr(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", &data, "--min-freq", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = report["acc_mc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn explain_unknown_id_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let data = dir.path().to_str().unwrap().to_string();
    let ckpt = dir.path().join("model.cfrc");
    let out = cfr(&[
        "train", "--data", &data, "--out", ckpt.to_str().unwrap(), "--epochs", "1",
        "--dim", "8", "--min-freq", "0",
    ]);
    assert!(out.status.success());
    let out = cfr(&[
        "explain", "--ckpt", ckpt.to_str().unwrap(), "--data", &data, "--id", "nope",
        "--min-freq", "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
