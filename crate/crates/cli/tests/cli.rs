use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concept-forgetting"))
        .args(args)
        .env("CONCEPT_FORGETTING_WORKERS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, extra: &[&str]) -> String {
    let feats = dir.join("feats").to_str().unwrap().to_owned();
    let mut args = vec!["synth", "--drift", "rotation", "--seed", "0", "--out", &feats];
    args.extend_from_slice(extra);
    ok(&args);
    feats
}

fn tuned<'a>(feats: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "analyze", "--features-root", feats, "--k", "4", "--dead-window-steps", "10",
        "--dead-loss-weight", "1", "--output-dir", out,
    ]
}

fn without_timing(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timing");
    v
}

#[test]
fn synth_analyze_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let feats = synth(dir.path(), &[]);
    let out = dir.path().join("out");
    ok(&tuned(&feats, out.to_str().unwrap()));
    for f in [
        "report.json", "active_counts.csv", "deletion.csv", "regained.csv",
        "trajectories.csv", "taxonomy.csv", "probe_panels.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let again = dir.path().join("again");
    ok(&[
        "report",
        "--input", out.join("report.json").to_str().unwrap(),
        "--out", again.to_str().unwrap(),
    ]);
    for f in ["deletion.csv", "trajectories.csv", "taxonomy.csv"] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn repeated_analysis_is_identical_modulo_timing() {
    let dir = tempfile::tempdir().unwrap();
    let feats = synth(dir.path(), &[]);
    let out = dir.path().join("out");
    ok(&tuned(&feats, out.to_str().unwrap()));
    let first = without_timing(&out.join("report.json"));
    let first_csv = std::fs::read(out.join("deletion.csv")).unwrap();
    ok(&tuned(&feats, out.to_str().unwrap()));
    assert_eq!(first, without_timing(&out.join("report.json")));
    assert_eq!(first_csv, std::fs::read(out.join("deletion.csv")).unwrap());
}

#[test]
fn missing_blob_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let feats = synth(dir.path(), &[]);
    std::fs::remove_file(Path::new(&feats).join("task0/ckpt1/test/features.f32")).unwrap();
    let out = dir.path().join("out");
    let res = cli(&tuned(&feats, out.to_str().unwrap()));
    assert_eq!(res.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("task0/ckpt1/test/features.f32"), "{stderr}");
    assert!(!out.join("report.json").exists());
}

#[test]
fn malformed_config_exits_with_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, r#"{"tau": "often"}"#).unwrap();
    let res = cli(&["analyze", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn out_of_range_tau_is_rejected() {
    let res = cli(&["analyze", "--tau", "1.5"]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let feats = synth(dir.path(), &["--n-train", "600", "--n-test", "300"]);
    let out = dir.path().join("sweep");
    ok(&[
        "sweep", "--features-root", &feats, "--dead-window-steps", "10",
        "--dead-loss-weight", "1", "--ks", "4", "--batch-sizes", "16", "--n-runs", "2",
        "--taus", "0.05,0.1", "--output-dir", out.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("sweep_report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 1);
    assert_eq!(report["summary"].as_array().unwrap().len(), 2);
    assert!(out.join("sweep_summary.csv").exists());
}
