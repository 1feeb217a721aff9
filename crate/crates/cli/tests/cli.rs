use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 2
out_dir = "run"
[corpus]
train = 4
val = 2
test = 3
[corpus.trajectory]
kind = "eight_drive"
duration = 3.0
[train]
epochs = 1
"#;

fn stateest(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stateest"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = stateest(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    dir
}

#[test]
fn help_and_usage_exit_codes() {
    let dir = setup();
    assert_eq!(stateest(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(stateest(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(stateest(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(stateest(dir.path(), &["evaluate", "--filter", "ukf"]).status.code(), Some(1));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[train]\nepohcs = 3\n").unwrap();
    let out = stateest(dir.path(), &["--config", "bad.toml", "simulate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epohcs"));
}

#[test]
fn missing_inputs_name_the_path() {
    let dir = setup();
    let out = stateest(dir.path(), &["--config", "run.toml", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.jsonl"));

    ok(dir.path(), &["--config", "run.toml", "simulate"]);
    let out = stateest(dir.path(), &["--config", "run.toml", "evaluate", "--filter", "kalmannet"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint.json"));
}

#[test]
fn resume_continues_epoch_counter() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "simulate"]);
    ok(d, &["--config", "run.toml", "train"]);
    let out = ok(d, &["--config", "run.toml", "train", "--checkpoint", "run/checkpoint.json"]);
    assert!(out.contains("epoch    2"), "{out}");
    let history = fs::read_to_string(d.join("run/loss_history.csv")).unwrap();
    let epochs: Vec<&str> = history.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2"]);
}

#[test]
fn compare_rejects_reports_from_different_corpora() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "simulate"]);
    ok(d, &["--config", "run.toml", "evaluate", "--filter", "kf"]);
    ok(d, &["--config", "run.toml", "--seed", "3", "--out", "other", "simulate"]);
    ok(d, &["--config", "run.toml", "--seed", "3", "--out", "other", "evaluate", "--filter", "imm"]);
    let out = stateest(d, &["compare", "run/eval_kf/report.json", "other/eval_imm/report.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different corpora"));
}

#[test]
fn evaluate_compare_and_report_agree() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "simulate"]);
    ok(d, &["--config", "run.toml", "evaluate", "--filter", "kf"]);
    ok(d, &["--config", "run.toml", "evaluate", "--filter", "imm"]);
    let table = ok(
        d,
        &["--config", "run.toml", "compare", "run/eval_kf/report.json", "run/eval_imm/report.json"],
    );
    assert!(table.lines().any(|l| l.starts_with("velocity") && l.contains("rmse")));
    let csv = fs::read_to_string(d.join("run/comparison.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "group,metric,kf,kf_best,imm,imm_best");
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert!(cells[3] == "1" || cells[5] == "1", "{line}");
    }

    let header = fs::read_to_string(d.join("run/eval_imm/steps.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.ends_with("mu_CV,mu_CA,mu_CT(+0.3),mu_CT(-0.3)"), "{header}");

    let recomputed: serde_json::Value =
        serde_json::from_str(&ok(d, &["report", "run/eval_imm/steps.csv"])).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/eval_imm/report.json")).unwrap()).unwrap();
    assert_eq!(recomputed["rmse"], report["aggregates"]["rmse"]);
    assert_eq!(recomputed["mae"], report["aggregates"]["mae"]);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = setup();
    let d = dir.path();
    for (threads, out) in [("1", "one"), ("3", "three")] {
        let status = Command::new(env!("CARGO_BIN_EXE_stateest"))
            .current_dir(d)
            .env("STATEEST_THREADS", threads)
            .args(["--config", "run.toml", "--out", out, "simulate"])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        let status = Command::new(env!("CARGO_BIN_EXE_stateest"))
            .current_dir(d)
            .env("STATEEST_THREADS", threads)
            .args(["--config", "run.toml", "--out", out, "train"])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
    }
    for f in ["train.jsonl", "test.jsonl", "checkpoint.json"] {
        assert_eq!(fs::read(d.join("one").join(f)).unwrap(), fs::read(d.join("three").join(f)).unwrap(), "{f}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_stateest"))
        .current_dir(d)
        .env("STATEEST_THREADS", "zero")
        .args(["simulate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
