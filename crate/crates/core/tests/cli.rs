mod common;

use common::tiny_config;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ds3net")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_dump() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run_dir = root.path().join("run");
    let eval_dir = root.path().join("eval");
    let cfg_path = root.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&tiny_config(0)).unwrap()).unwrap();

    let gen = ok(&[
        "gen-data",
        "--patients",
        "10",
        "--slices",
        "2",
        "--paired-fraction",
        "0.3",
        "--out",
        s(&data),
    ]);
    assert!(gen.contains("split hash"));
    assert!(data.join("manifest.json").exists());

    ok(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out-dir", s(&run_dir)]);
    for f in [
        "config.json",
        "metrics.csv",
        "summary.json",
        "stage1_teacher.safetensors",
        "final_teacher.safetensors",
        "final_student.safetensors",
    ] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }

    let ckpt = run_dir.join("final_student.safetensors");
    ok(&[
        "eval",
        "--config",
        s(&cfg_path),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--error-maps",
        "--out-dir",
        s(&eval_dir),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["meta"]["split_name"], "test");
    let n = report["samples"].as_array().unwrap().len();
    assert!(n > 0);
    assert_eq!(std::fs::read_dir(eval_dir.join("error_maps")).unwrap().count(), n);
    let csv = std::fs::read_to_string(eval_dir.join("per_sample.csv")).unwrap();
    assert_eq!(csv.lines().count(), n + 1);

    ok(&[
        "dump-difficulty",
        "--config",
        s(&cfg_path),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--count",
        "2",
        "--out-dir",
        s(&eval_dir),
    ]);
    assert_eq!(std::fs::read_dir(eval_dir.join("difficulty")).unwrap().count(), 2);

    let bad = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "nope"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nope"));
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--checkpoint", s(&root.path().join("none.safetensors"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.safetensors"));
}
