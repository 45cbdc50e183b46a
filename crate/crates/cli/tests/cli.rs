use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn parkrate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parkrate"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = parkrate(dir, args);
    assert!(
        out.status.success(),
        "parkrate {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// synth → label → build → train → eval → cv → ablation → predict, all in `dir`.
fn pipeline(dir: &Path) {
    ok(dir, &["--seed", "5", "--out-dir", "data", "synth", "--n-sectors", "15", "--n-days", "14", "--scan-coverage", "0.3"]);
    ok(dir, &["--out-dir", "labels", "label", "--data", "data"]);
    ok(dir, &["--seed", "5", "--out-dir", "ds", "build", "--data", "data", "--labels", "labels/labels.csv"]);
    ok(dir, &["--seed", "5", "--out-dir", "model", "train", "--dataset", "ds/dataset.csv", "--epochs", "2", "--batch-size", "64"]);
    ok(dir, &["--seed", "5", "--out-dir", "eval", "eval", "--model", "model/model.json", "--dataset", "ds/dataset.csv"]);
    ok(dir, &["--seed", "5", "--out-dir", "cv", "cv", "--dataset", "ds/dataset.csv", "--k", "3", "--epochs", "2"]);
    ok(dir, &["--seed", "5", "--out-dir", "ablation", "ablation", "--data", "data", "--epochs", "2", "--batch-size", "64"]);
    ok(dir, &["--out-dir", "pred", "predict", "--model", "model/model.json", "--data", "data", "--date", "2022-01-05"]);
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in std::fs::read_dir(dir).unwrap() {
        let sub = sub.unwrap().path();
        for f in std::fs::read_dir(&sub).unwrap() {
            let f = f.unwrap().path();
            if f.file_name().unwrap() != "manifest.json" {
                let rel = f.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&f).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (outputs(a.path()), outputs(b.path()));
    for name in [
        "data/scans.csv",
        "data/truth.csv",
        "labels/labels.csv",
        "labels/sector_stats.geojson",
        "ds/dataset.csv",
        "ds/standardizer.json",
        "model/model.json",
        "model/report.json",
        "eval/eval_report.json",
        "cv/cv_curves.csv",
        "ablation/table.csv",
        "pred/predictions.csv",
    ] {
        assert!(fa.contains_key(name), "missing {name}");
    }
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs between runs");
    }

    let table = String::from_utf8(fa["ablation/table.csv"].clone()).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("Method,Raw Test Set (MAE),Smoothed Test Set (MAE)"));
    assert!(lines.next().unwrap().starts_with("Without Smoothing,"));
    assert!(lines.next().unwrap().starts_with("With Smoothing,"));

    let preds = String::from_utf8(fa["pred/predictions.csv"].clone()).unwrap();
    assert_eq!(preds.lines().count(), 1 + 15 * 12);
}

#[test]
fn manifest_records_run() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "9", "--out-dir", "data", "synth", "--n-sectors", "5", "--n-days", "3"]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "synth");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["n_sectors"], "5");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 7);
    assert!(m["created_at"].as_str().unwrap().contains('T'));

    ok(dir.path(), &["--out-dir", "labels", "label", "--data", "data", "--mode", "raw"]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("labels/manifest.json")).unwrap()).unwrap();
    let inputs = m["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    assert_eq!(inputs[0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("gen.cfg"), "n_sectors = 4\nn_days = 6\n").unwrap();
    ok(dir.path(), &["--config", "gen.cfg", "--out-dir", "data", "synth", "--n-days", "2"]);
    let truth = std::fs::read_to_string(dir.path().join("data/truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 1 + 4 * 2 * 12);

    std::fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let out = parkrate(dir.path(), &["--config", "bad.cfg", "--out-dir", "bad", "synth"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn missing_model_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("dataset.csv"), "x\n").unwrap();
    let out = parkrate(dir.path(), &["eval", "--model", "absent/model.json", "--dataset", "dataset.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent/model.json"), "{err}");
    assert!(!dir.path().join("eval_report.json").exists());
}

#[test]
fn failed_run_removes_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    // A directory where truth.csv should go makes synth fail after the corpus is written.
    std::fs::create_dir_all(dir.path().join("data/truth.csv")).unwrap();
    let out = parkrate(dir.path(), &["--out-dir", "data", "synth", "--n-sectors", "5", "--n-days", "3"]);
    assert!(!out.status.success());
    for name in ["sectors.csv", "pois.csv", "weather.csv", "calendar.csv", "scans.csv", "manifest.json"] {
        assert!(!dir.path().join("data").join(name).exists(), "{name} left behind");
    }
}

#[test]
fn invalid_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = parkrate(dir.path(), &["synth", "--scan-coverage", "1.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("scan_coverage"));
    let out = parkrate(dir.path(), &["label", "--data", "nowhere", "--mode", "gaussian"]);
    assert!(!out.status.success());
}
