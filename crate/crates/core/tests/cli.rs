//! Command-line contract: exit codes, the golden evaluation fixture and
//! the report table.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn anoseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anoseg"))
        .current_dir(dir)
        .env_remove("ANOSEG_WORKERS")
        .args(args)
        .output()
        .unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden").join(name)
}

#[test]
fn golden_eval_reproduces_checked_in_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("report.json");
    let o = anoseg(
        tmp.path(),
        &[
            "eval",
            "--scores",
            fixture("scores.f32").to_str().unwrap(),
            "--labels",
            fixture("labels.png").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(fixture("report.json")).unwrap());

    // independent reference values (scikit-learn on the same f32 scores)
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let get = |k: &str| report[k].as_f64().unwrap();
    assert!((get("ap") - 0.45257396521735693).abs() < 1e-12);
    assert!((get("auroc") - 0.87875).abs() < 1e-12);
    assert!((get("fpr_at_95") - 0.415625).abs() < 1e-12);
    assert_eq!(report["n_positive"], 40);
    assert_eq!(report["n_negative"], 320);

    let prov = std::fs::read_to_string(tmp.path().join("provenance.jsonl")).unwrap();
    assert_eq!(prov.lines().count(), 1);
    assert!(prov.contains("\"command\":\"eval\"") && prov.contains("config_hash"));
}

#[test]
fn streaming_eval_flag_marks_report_approximate() {
    let tmp = tempfile::tempdir().unwrap();
    let o = anoseg(
        tmp.path(),
        &[
            "eval",
            "--scores",
            fixture("scores.f32").to_str().unwrap(),
            "--labels",
            fixture("labels.png").to_str().unwrap(),
            "--streaming",
            "--out",
            "r.json",
        ],
    );
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["approximate"], true);
    assert!((report["auroc"].as_f64().unwrap() - 0.87875).abs() < 0.002);
}

#[test]
fn missing_seed_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = anoseg(
        tmp.path(),
        &["generate", "--manifest", "m.jsonl", "--classes", "c.json", "--catalog", "k.jsonl", "--out", "o"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
    let o = anoseg(tmp.path(), &["train-toy", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_and_flag_print_usage() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["eval", "--bogus"][..]] {
        let o = anoseg(tmp.path(), args);
        assert_eq!(o.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    }
}

#[test]
fn missing_input_file_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = anoseg(tmp.path(), &["eval", "--scores", "nope.f32", "--labels", "nope.png", "--out", "r.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.f32"));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("m.ckpt"), b"not a model").unwrap();
    std::fs::write(tmp.path().join("manifest.jsonl"), "").unwrap();
    let o = anoseg(tmp.path(), &["score", "--model", "m.ckpt", "--manifest", "manifest.jsonl", "--out", "s"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_has_one_row_per_run_and_score() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("cfg.toml"),
        "[shapes]\nimage_size = 24\nnum_train = 6\nnum_test = 2\nnum_negatives = 10\n[train]\nepochs = 1\nmodel_width = 4\n",
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let o = anoseg(dir, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    ok(&["make-shapes", "--out", "data", "--seed", "1", "--config", "cfg.toml"]);
    for (run, preset) in [("runA", "dh2"), ("runB", "sd")] {
        ok(&["train-toy", "--out", run, "--seed", "2", "--preset", preset, "--config", "cfg.toml"]);
        ok(&["score", "--model", &format!("{run}/model.ckpt"), "--manifest", "data/manifest.jsonl", "--kinds", "ml,hybrid", "--out", run]);
        ok(&["eval", "--index", &format!("{run}/scores.jsonl"), "--out", &format!("{run}/eval.json")]);
    }
    ok(&["report", "--runs", "runA,runB", "--out", "table.csv", "--png-dir", "png"]);
    let csv = std::fs::read_to_string(dir.join("table.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "run,score,AP,FPR95,AUROC,mIoU");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("runA,ml,") && lines[4].starts_with("runB,hybrid,"));
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 6));
    assert!(dir.join("png/runA/00000_hybrid.png").is_file());
    assert_eq!(std::fs::read_to_string(dir.join("runA/provenance.jsonl")).unwrap().lines().count(), 3);
}
