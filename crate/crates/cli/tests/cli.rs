use std::path::Path;
use std::process::{Command, Output};

use tabnsa::data::synthetic::two_gaussians;

fn tabnsa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabnsa"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_data(dir: &Path, rows: usize) {
    two_gaussians(rows, 4, 0).write_csv(dir.join("data.csv")).unwrap();
}

#[test]
fn missing_target_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 40);
    let o = tabnsa(&["train", "--csv", "data.csv", "--target", "outcome", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("'outcome'"), "{}", stderr(&o));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 40);
    std::fs::write(dir.path().join("cfg.json"), r#"{"version": 1, "target": "label", "bugdet": 3}"#).unwrap();
    let o = tabnsa(&["train", "--config", "cfg.json", "--csv", "data.csv", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bugdet"), "{}", stderr(&o));
}

#[test]
fn tune_writes_sensitivity_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 80);
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"version": 1, "target": "label", "train": {"max_epochs": 3},
            "space": {"head_dim": {"lo": 2, "hi": 4}, "heads": {"lo": 1, "hi": 2}}}"#,
    )
    .unwrap();
    let run = |budget: &str| tabnsa(&["tune", "--config", "cfg.json", "--csv", "data.csv", "--budget", budget, "--out", "tune"], dir.path());
    let o = run("1");
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("tune");
    let sens = std::fs::read_to_string(out.join("sensitivity.csv")).unwrap();
    let lines: Vec<&str> = sens.lines().collect();
    assert_eq!(lines[0], "trial,val_metric,best_so_far");
    assert_eq!(lines.len(), 2);
    for f in ["trials.jsonl", "best_config.json", "tune_report.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let first = std::fs::read_to_string(out.join("trials.jsonl")).unwrap();
    let o = run("3");
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("trials.jsonl")).unwrap();
    assert!(log.starts_with(&first));
    assert_eq!(log.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(out.join("sensitivity.csv")).unwrap().lines().count(), 4);
}

#[test]
fn eval_reproduces_training_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 60);
    let o = tabnsa(&["train", "--csv", "data.csv", "--target", "label", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = tabnsa(&["eval", "--checkpoint", "run/seed_0/checkpoint.bin", "--csv", "data.csv", "--out", "ev"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/eval.json")).unwrap()).unwrap();
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.5..=1.0).contains(&auc));
}

#[test]
fn flops_json_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let o = tabnsa(&["flops", "--tokens", "8", "--compare-dense", "--out", "fl"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let got: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("fl/flops.json")).unwrap()).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/flops_tokens8.json");
    let want: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(golden).unwrap()).unwrap();
    assert_eq!(got, want);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("attention computation"));
}
