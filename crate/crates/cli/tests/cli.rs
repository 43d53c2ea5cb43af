use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dse_core::tile::read_tile;
use serde_json::Value;

const SMALL: &str = r#"{
  "seed": 4,
  "n_scenes": 10,
  "scene": {"size": 32},
  "steps": 5,
  "train": {"epochs": 1, "width": 8, "time_dim": 8},
  "segmenter": {"epochs": 2}
}"#;

fn dse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dse")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dse(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn run_record(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("run.json")).unwrap()).unwrap()
}

/// Small corpus plus a config file under a fresh temp dir.
fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.json");
    fs::write(&cfg, SMALL).unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", &s(&cfg), "--out", &s(&data)]);
    (tmp, cfg, data)
}

fn train(root: &Path, cfg: &Path, data: &Path) -> PathBuf {
    let out = root.join("train");
    ok(&["train", "--config", &s(cfg), "--data", &s(data), "--out", &s(&out)]);
    out.join("model.dsem")
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dse(&[]).status.code(), Some(1));
    assert_eq!(dse(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dse(&["gen-data", "--seed", "abc"]).status.code(), Some(1));
    assert_eq!(dse(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epoch": 3}}"#).unwrap();
    let out = dse(&["gen-data", "--config", &s(&cfg), "--out", &s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn missing_model_is_a_runtime_error() {
    let (tmp, cfg, data) = setup();
    let out = dse(&[
        "translate",
        "--config",
        &s(&cfg),
        "--input",
        &s(&data.join("scene_00000_sar_noisy_0.dset")),
        "--model",
        &s(&tmp.path().join("nope.dsem")),
        "--out",
        &s(&tmp.path().join("t")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_and_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join("data");
    ok(&["gen-data", "--config", &s(&cfg), "--seed", "9", "--n", "3", "--out", &s(&out)]);
    let rec = run_record(&out);
    assert_eq!(rec["seed"], 9);
    assert_eq!(rec["config"]["seed"], 9);
    assert_eq!(rec["config"]["n_scenes"], 3);
    assert_eq!(rec["command"], "gen-data");
}

#[test]
fn translate_is_seed_deterministic_and_pred_equal_gt_scores_one() {
    let (tmp, cfg, data) = setup();
    let model = train(tmp.path(), &cfg, &data);
    let input = s(&data.join("scene_00002_sar_noisy_0.dset"));
    let mut tiles = Vec::new();
    for (name, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let out = tmp.path().join(name);
        ok(&[
            "translate", "--config", &s(&cfg), "--seed", seed, "--input", &input, "--model", &s(&model), "--out", &s(&out),
        ]);
        tiles.push(fs::read(out.join("syneo.dset")).unwrap());
    }
    assert_eq!(tiles[0], tiles[1]);
    assert_ne!(tiles[0], tiles[2]);

    let seg = tmp.path().join("seg");
    ok(&["eval-seg", "--config", &s(&cfg), "--data", &s(&data), "--pred", &s(&data), "--out", &s(&seg)]);
    let metrics = run_record(&seg)["results"]["metrics"]["pred"].clone();
    let obj = metrics.as_object().unwrap();
    assert_eq!(obj.len(), 9);
    for (k, v) in obj {
        assert_eq!(v.as_f64(), Some(1.0), "{k}");
    }
}

#[test]
fn ensemble_and_evaluation_smoke() {
    let (tmp, cfg, data) = setup();
    let model = train(tmp.path(), &cfg, &data);
    let ens = tmp.path().join("ens");
    ok(&[
        "ensemble",
        "--config",
        &s(&cfg),
        "--input",
        &s(&data.join("scene_00000_sar_noisy_0.dset")),
        "--model",
        &s(&model),
        "--k",
        "8",
        "--out",
        &s(&ens),
    ]);
    let var = read_tile(ens.join("variance.dset")).unwrap();
    assert!(var.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(ens.join("sample_07.dset").exists());
    assert!(ens.join("variance.png").exists());

    let evt = tmp.path().join("evt");
    ok(&["eval-translation", "--config", &s(&cfg), "--data", &s(&data), "--model", &s(&model), "--out", &s(&evt)]);
    let metrics = &run_record(&evt)["results"]["metrics"];
    for row in ["SAR", "SynEO"] {
        for k in ["psnr", "ssim"] {
            assert!(metrics[row][k].as_f64().unwrap().is_finite(), "{row} {k}");
        }
    }

    let report = tmp.path().join("report");
    ok(&["report", "--config", &s(&cfg), "--runs", &s(&evt), "--out", &s(&report)]);
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.lines().count() >= 3, "{csv}");
}

#[test]
fn rerun_from_record_reproduces_outputs() {
    let (tmp, _cfg, data) = setup();
    let again = tmp.path().join("again");
    ok(&["gen-data", "--config", &s(&data.join("run.json")), "--out", &s(&again)]);
    for name in ["manifest.json", "split.json", "scene_00003_eo.dset", "run.json"] {
        assert_eq!(fs::read(data.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }
}
