use std::path::Path;
use std::process::{Command, Output};

fn canopyseg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canopyseg"))
        .args(args)
        .current_dir(dir)
        .env("CANOPYSEG_THREADS", "1")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = canopyseg(&["synth", "--out", "x", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(canopyseg(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(canopyseg(&[], dir.path()).status.code(), Some(1));
}

#[test]
fn help_and_version_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(canopyseg(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(canopyseg(&["--version"], dir.path()).status.code(), Some(0));
    assert_eq!(canopyseg(&["train", "--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"scene": {"widht": 64}}"#).unwrap();
    let o = canopyseg(&["synth", "--config", "c.json", "--out", "s"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("widht"));
}

#[test]
fn missing_or_corrupt_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = canopyseg(
        &["prepare", "--image", "none.png", "--mask", "none.png", "--out", "d"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.ckpt"), b"CSEG garbage").unwrap();
    let o = canopyseg(&["predict", "--model", "bad.ckpt", "--image", "x.png", "--out", "o.png"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("format"), "{}", stderr(&o));
}

#[test]
fn split_of_empty_store_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("d")).unwrap();
    let o = canopyseg(&["split", "--data", "d", "--seed", "1", "--out", "m.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

/// Runs synth → prepare → split → train in `dir` with a tiny model.
fn small_pipeline(dir: &Path, width: usize, height: usize) {
    let config = format!(
        r#"{{"scene": {{"width": {width}, "height": {height}, "seed": 4, "ground_patch_probability": 0.0}},
            "model": {{"depth": 1, "base_channels": 2}},
            "train": {{"epochs": 1, "batch_size": 8, "learning_rate": 0.01}}}}"#
    );
    std::fs::write(dir.join("run.json"), config).unwrap();
    let steps: [&[&str]; 4] = [
        &["synth", "--config", "run.json", "--out", "scenes"],
        &[
            "prepare",
            "--image",
            "scenes/scene_000.img.png",
            "--mask",
            "scenes/scene_000.tgt.png",
            "--out",
            "data",
        ],
        &["split", "--data", "data", "--seed", "2", "--out", "manifest.json"],
        &[
            "train",
            "--config",
            "run.json",
            "--data",
            "data",
            "--manifest",
            "manifest.json",
            "--out",
            "model.ckpt",
            "--epochs",
            "2",
        ],
    ];
    for args in steps {
        let o = canopyseg(args, dir);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn flags_override_config_and_eval_defaults_threshold() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path(), 256, 256);
    assert!(dir.path().join("data/scene_000.rejected.csv").exists());

    // --epochs 2 beats the config's 1
    let csv = std::fs::read_to_string(dir.path().join("model.loss.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,mean_loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("2,"));

    let eval = ["eval", "--model", "model.ckpt", "--data", "data", "--manifest", "manifest.json"];
    let o = canopyseg(&eval, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("default 0.85"), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("model.eval.json")).unwrap()).unwrap();
    assert_eq!(report["threshold"], 0.85);
    let text = std::fs::read_to_string(dir.path().join("model.eval.txt")).unwrap();
    assert!(text.contains("True Positive") && text.contains("Target coverage"));

    let o = canopyseg(&[&eval[..], &["--threshold", "0.3"]].concat(), dir.path());
    assert!(o.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("model.eval.json")).unwrap()).unwrap();
    assert_eq!(report["threshold"], 0.3);

    // calibration stores its choice in the checkpoint; eval then uses it
    let cal = ["calibrate", "--model", "model.ckpt", "--data", "data", "--manifest", "manifest.json"];
    let o = canopyseg(&cal, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let chosen: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("model.calibration.json")).unwrap()).unwrap();
    let o = canopyseg(&eval, dir.path());
    assert!(stderr(&o).contains("calibrated threshold"), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("model.eval.json")).unwrap()).unwrap();
    assert_eq!(report["threshold"], chosen["chosen_threshold"]);
}

#[test]
fn predict_matches_input_size_and_warns_on_ragged_borders() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path(), 192, 128);
    let o = canopyseg(
        &["predict", "--model", "model.ckpt", "--image", "scenes/scene_000.img.png", "--out", "o.png", "--threshold", "0.01"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stderr(&o).contains("borders"));
    let input = canopyseg::raster::load_rgb(dir.path().join("scenes/scene_000.img.png")).unwrap();
    let overlay = canopyseg::raster::load_rgb(dir.path().join("o.png")).unwrap();
    assert_eq!((overlay.width, overlay.height), (input.width, input.height));

    // crop to a ragged size: the uncovered strip must come back untouched
    let ragged = input.crop(0, 0, 150, 100).unwrap();
    canopyseg::raster::save_rgb(&ragged, dir.path().join("ragged.png")).unwrap();
    let o = canopyseg(
        &["predict", "--model", "model.ckpt", "--image", "ragged.png", "--out", "r.png", "--threshold", "0.01"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("borders"), "{}", stderr(&o));
    let out = canopyseg::raster::load_rgb(dir.path().join("r.png")).unwrap();
    assert_eq!((out.width, out.height), (150, 100));
    for y in 0..100 {
        for x in 0..150 {
            if x >= 128 || y >= 64 {
                assert_eq!(out.pixel(x, y), ragged.pixel(x, y), "({x},{y})");
            }
        }
    }
}
