use std::fs;
use std::path::Path;
use std::process::Command;

fn xai3d(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_xai3d"))
        .current_dir(dir)
        .args(args)
        .env_remove("XAI3D_SEED")
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"{
  "cohort": {"n_subjects": 40},
  "training": {"max_epochs": 3},
  "explain": {"max_subjects": 8, "shap": {"permutations": 2}},
  "metrics": {"draws": 20}
}"#;

#[test]
fn missing_prerequisites_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    let out = xai3d(dir.path(), &["--config", "cfg.json", "--out", "o", "train"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest.json") && err.contains("generate"), "{err}");
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"split": [0.5, 0.5, 0.5]}"#).unwrap();
    let out = xai3d(dir.path(), &["--config", "cfg.json", "generate"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("cfg.json"), r#"{"not_a_key": 1}"#).unwrap();
    assert_eq!(
        xai3d(dir.path(), &["--config", "cfg.json", "generate"]).status.code(),
        Some(2)
    );
    let out = Command::new(env!("CARGO_BIN_EXE_xai3d"))
        .current_dir(dir.path())
        .env("XAI3D_COHORT__N_SUBJECTS", "3")
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn staged_run_matches_single_run_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    for stage in [
        "generate",
        "train",
        "explain",
        "aggregate",
        "evaluate",
        "ablate",
        "atlas-report",
    ] {
        let out = xai3d(
            dir.path(),
            &["--config", "cfg.json", "--out", "a", "--threads", "2", stage],
        );
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = xai3d(dir.path(), &["--config", "cfg.json", "--out", "b", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "scores.csv",
        "ablation.csv",
        "atlas/skeleton_L_class0_histogram.csv",
        "models/skeleton_L/train_report.csv",
        "global/skeleton_L/class0/framework.xv3d",
    ] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let scores = fs::read_to_string(dir.path().join("a/scores.csv")).unwrap();
    assert!(scores.starts_with("method,hemisphere,modality,class,faithfulness,complexity\n"));
    assert_eq!(scores.lines().count(), 7);
    let ablation = fs::read_to_string(dir.path().join("a/ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 13);

    let manifest = |run: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.path().join(run).join("run_manifest.json")).unwrap()).unwrap()
    };
    assert_eq!(manifest("a")["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest("a")["config_hash"], manifest("b")["config_hash"]);

    let seeded = xai3d(
        dir.path(),
        &["--config", "cfg.json", "--out", "c", "--seed", "1", "generate"],
    );
    assert!(seeded.status.success());
    assert!(
        fs::read(dir.path().join("a/cohort/manifest.json")).unwrap()
            != fs::read(dir.path().join("c/cohort/manifest.json")).unwrap()
    );
    assert_ne!(manifest("a")["config_hash"], manifest("c")["config_hash"]);

    let vol = dir.path().join("a/global/skeleton_L/class1/framework.xv3d");
    let out = xai3d(
        dir.path(),
        &["slices", vol.to_str().unwrap(), "--axis", "x", "--dir", "sl"],
    );
    assert!(out.status.success());
    assert_eq!(fs::read_dir(dir.path().join("sl")).unwrap().count(), 16);
    let missing = xai3d(dir.path(), &["slices", "nope.xv3d", "--dir", "sl"]);
    assert_eq!(missing.status.code(), Some(3));
}
