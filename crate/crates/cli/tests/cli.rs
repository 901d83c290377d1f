use std::fs;
use std::path::Path;

use diffgnss_cli::run;

fn call(args: &[&str]) -> (i32, String) {
    let mut err = Vec::new();
    let code = run(std::iter::once("diffgnss").chain(args.iter().copied()), &mut err);
    (code, String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) {
    let (code, err) = call(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_suite(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("suite.json");
    fs::write(&cfg, r#"{"segments_per_scene": 1, "epochs": 24}"#).unwrap();
    cfg
}

fn tiny_train_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("train.json");
    fs::write(&cfg, r#"{"epochs": 1, "batch": 16, "model": {"hidden": 6, "state": 4}}"#).unwrap();
    cfg
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(call(&["frobnicate"]).0, 1);
    assert_eq!(call(&["synth"]).0, 1);
    assert_eq!(call(&["synth", "--out", "x", "--bogus"]).0, 1);
    let (code, err) = call(&["train", "--config", "/no/such/cfg.json", "--data", ".", "--out", "x"]);
    assert_eq!(code, 1);
    assert!(err.contains("/no/such/cfg.json"), "{err}");
    let (code, err) = call(&["infer", "--checkpoint", "/no/such.dgns", "--data", ".", "--out", "p.csv"]);
    assert_eq!(code, 1);
    assert!(err.contains("/no/such.dgns"), "{err}");
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"batch": 0}"#).unwrap();
    let (code, err) = call(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(code, 1, "{err}");
    let (code, _) = call(&["train", "--ablate", "no_such_flag", "--data", ".", "--out", "x"]);
    assert_eq!(code, 1);
}

#[test]
fn corrupt_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.dgns");
    fs::write(&ck, b"DGNS\x01\x00\x00\x00").unwrap();
    ok(&["synth", "--out", p(dir.path()), "--config", p(&small_suite(dir.path()))]);
    let out = dir.path().join("p.csv");
    let (code, err) = call(&["infer", "--checkpoint", p(&ck), "--data", p(dir.path()), "--out", p(&out)]);
    assert_eq!(code, 2);
    assert!(err.contains("truncated"), "{err}");
}

#[test]
fn help_lists_flags() {
    for sub in ["synth", "prepare", "train", "infer", "evaluate", "position", "study"] {
        assert_eq!(call(&[sub, "--help"]).0, 0);
    }
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let suite = small_suite(d);
    let tcfg = tiny_train_config(d);
    ok(&["synth", "--seed", "3", "--out", p(&data), "--config", p(&suite)]);
    for f in ["train.csv", "valid.csv", "test.csv", "suite.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    ok(&["prepare", "--data", p(&data), "--out", p(&d.join("prep")), "--config", p(&tcfg)]);
    let norm: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("prep/norm.json")).unwrap()).unwrap();
    assert_eq!(norm["mean"].as_array().unwrap().len(), 5);

    let run_dir = d.join("run");
    ok(&["train", "--config", p(&tcfg), "--data", p(&data), "--out", p(&run_dir), "--seed", "1"]);
    let ck = run_dir.join("checkpoint.dgns");
    let log = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let preds = d.join("preds.csv");
    ok(&["infer", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&preds), "--ddim-steps", "2"]);
    let report = d.join("report");
    ok(&["evaluate", "--predictions", p(&preds), "--data", p(&data), "--out", p(&report)]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    assert!(summary["mae"].as_f64().unwrap() >= 0.0);
    assert!(summary["rmse"].as_f64().unwrap() >= summary["mae"].as_f64().unwrap());
    assert!(summary["positioning"]["epochs"].as_u64().unwrap() > 0);
    for f in ["metrics.csv", "per_scene.csv", "cdf.csv", "traces.csv"] {
        assert!(report.join(f).is_file(), "{f}");
    }

    let pos = d.join("pos.json");
    ok(&["position", "--data", p(&data), "--predictions", p(&preds), "--out", p(&pos), "--exclude-uncertain"]);
    let oracle = d.join("oracle.json");
    ok(&["position", "--data", p(&data), "--oracle", "--out", p(&oracle), "--scene", "high_rise"]);
    let o: serde_json::Value = serde_json::from_str(&fs::read_to_string(&oracle).unwrap()).unwrap();
    assert!(o["mean_horizontal_corrected"].as_f64().unwrap() < 1e-3);

    let study = d.join("study.csv");
    ok(&["study", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&study), "--iterations", "1,2"]);
    assert_eq!(fs::read_to_string(&study).unwrap().lines().count(), 3);
    let (code, _) = call(&["study", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&study), "--iterations", "0"]);
    assert_eq!(code, 1);
}

#[test]
fn scene_filter_keeps_one_scene() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["synth", "--out", p(&out), "--config", p(&small_suite(dir.path())), "--scene", "bridge"]);
    let text = fs::read_to_string(out.join("test.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.contains(",bridge,")));
    assert_eq!(call(&["synth", "--out", p(&out), "--scene", "downtown"]).0, 1);
}
