use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use viewcon::nn::load_checkpoint;

const TINY_CONFIG: &str = r#"{
  "encoder": {"filters": [2, 3, 4], "upsample_csi": 1, "upsample_pwr": 1},
  "pretrain": {"epochs": 2, "batch_size": 8},
  "finetune": {"epochs": 4, "batch_size": 8, "val_every": 2},
  "seeds": [0, 1],
  "shots": [1, 2]
}"#;

fn viewcon(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viewcon"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Desk-profile dataset (4 per class) plus a tiny config in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&viewcon(&["generate", "--out", "data", "--per-class", "4", "--profile", "desk", "--seed", "3"], dir.path()));
    std::fs::write(dir.path().join("cfg.json"), TINY_CONFIG).unwrap();
    dir
}

#[test]
fn generate_records_seed_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["generate", "--out", "a", "--per-class", "50", "--seed", "7", "--profile", "desk"];
    ok(&viewcon(&args, d));
    let m = json(&d.join("a/manifest.json"));
    assert_eq!(m["samples"].as_array().unwrap().len(), 350);
    assert_eq!(m["generator"]["seed"], 7);
    let mut again = args;
    again[2] = "b";
    ok(&viewcon(&again, d));
    assert_eq!(std::fs::read(d.join("a/tensors.bin")).unwrap(), std::fs::read(d.join("b/tensors.bin")).unwrap());
    assert_eq!(std::fs::read(d.join("a/manifest.json")).unwrap(), std::fs::read(d.join("b/manifest.json")).unwrap());
}

#[test]
fn generate_default_profile_uses_full_shapes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&viewcon(&["generate", "--out", "d", "--per-class", "1"], dir.path()));
    let m = json(&dir.path().join("d/manifest.json"));
    let views = m["samples"][0]["views"].as_array().unwrap();
    let shape = |name: &str| views.iter().find(|v| v["modality"] == name).unwrap()["shape"].clone();
    assert_eq!(shape("csi1"), serde_json::json!([65, 501]));
    assert_eq!(shape("pwr"), serde_json::json!([100, 41]));
}

#[test]
fn invalid_generator_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = viewcon(&["generate", "--out", "x", "--rho", "1.2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("[0, 1]"), "{}", stderr(&out));
    let out = viewcon(&["generate", "--out", "x", "--sigma", "-1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = viewcon(&["generate", "--out", "x", "--profile", "huge"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = viewcon(&["generate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_routes_view_pairs_to_matching_encoders() {
    let ws = workspace();
    let d = ws.path();
    ok(&viewcon(&["pretrain", "--config", "cfg.json", "--data", "data", "--views", "csi1,pwr", "--out", "p"], d));
    for f in ["resolved_config.json", "run_record.json", "loss_history.csv", "alignment.json", "checkpoint/manifest.json"] {
        assert!(d.join("p").join(f).is_file(), "{f}");
    }
    let (bundle, _) = load_checkpoint(&d.join("p/checkpoint")).unwrap();
    assert_eq!(bundle.encoders[0].config.input_shape, (16, 48));
    assert_eq!(bundle.encoders[1].config.input_shape, (24, 16));
    let resolved = json(&d.join("p/resolved_config.json"));
    assert_eq!(resolved["views"], "csi1,pwr");
    assert_eq!(resolved["loss"]["temperature"], 0.5);
    let history = std::fs::read_to_string(d.join("p/loss_history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,loss,val_macro_f1"));
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn missing_view_exits_4_with_sample_id() {
    let ws = workspace();
    let d = ws.path();
    let mp = d.join("data/manifest.json");
    let mut m = json(&mp);
    let id = m["samples"][5]["id"].clone();
    m["samples"][5]["views"].as_array_mut().unwrap().retain(|v| v["modality"] != "csi2");
    std::fs::write(&mp, serde_json::to_string(&m).unwrap()).unwrap();
    let out = viewcon(&["pretrain", "--config", "cfg.json", "--data", "data", "--out", "p"], d);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains(&format!("sample {id}")), "{}", stderr(&out));
}

#[test]
fn truncated_dataset_exits_3() {
    let ws = workspace();
    let d = ws.path();
    let blob = d.join("data/tensors.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    let out = viewcon(&["pretrain", "--config", "cfg.json", "--data", "data", "--out", "p"], d);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let out = viewcon(&["pretrain", "--config", "cfg.json", "--data", "nowhere", "--out", "p"], d);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_problems_exit_2() {
    let ws = workspace();
    let d = ws.path();
    std::fs::write(d.join("typo.json"), r#"{"pretrian": {"epochs": 1}}"#).unwrap();
    let out = viewcon(&["pretrain", "--config", "typo.json", "--data", "data", "--out", "p"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("pretrian"), "{}", stderr(&out));
    let out = viewcon(&["pretrain", "--config", "cfg.json", "--data", "data", "--views", "csi1,csi1", "--out", "p"], d);
    assert_eq!(out.status.code(), Some(2));
    let out = viewcon(&["pretrain", "--config", "cfg.json", "--data", "data"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn finetune_subsets_and_freeze_contract() {
    let ws = workspace();
    let d = ws.path();
    ok(&viewcon(&["pretrain", "--config", "cfg.json", "--data", "data", "--out", "p"], d));
    ok(&viewcon(&["finetune", "--checkpoint", "p", "--data", "data", "--shots", "1", "--out", "f1"], d));
    let rec = json(&d.join("f1/run_record.json"));
    assert_eq!(rec["subset_ids"].as_array().unwrap().len(), 7);
    for f in ["resolved_config.json", "metrics.json", "confusion.csv", "summary.json"] {
        assert!(d.join("f1").join(f).is_file(), "{f}");
    }

    ok(&viewcon(&["finetune", "--checkpoint", "p/checkpoint", "--data", "data", "--shots", "all", "--out", "fa"], d));
    let rec = json(&d.join("fa/run_record.json"));
    assert_eq!(rec["subset_ids"].as_array().unwrap().len(), 21);

    let (pre, _) = load_checkpoint(&d.join("p/checkpoint")).unwrap();
    let (post, manifest) = load_checkpoint(&d.join("f1/checkpoint")).unwrap();
    assert_eq!(pre.encoder_checksum(), post.encoder_checksum());
    assert_eq!(pre.encoders, post.encoders);
    assert!(manifest.frozen[0] && manifest.frozen[1]);
    assert_ne!(pre.classifier, post.classifier);

    let out = viewcon(&["finetune", "--checkpoint", "p", "--data", "data", "--shots", "4", "--out", "f4"], d);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = viewcon(&["finetune", "--checkpoint", "p", "--data", "data", "--shots", "0", "--out", "f0"], d);
    assert_eq!(out.status.code(), Some(2));
    let out = viewcon(&["finetune", "--checkpoint", "missing", "--data", "data", "--out", "fm"], d);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn baseline_modes_and_subsets() {
    let ws = workspace();
    let d = ws.path();
    ok(&viewcon(&["baseline", "--config", "cfg.json", "--data", "data", "--shots", "1", "--out", "b1"], d));
    assert_eq!(json(&d.join("b1/run_record.json"))["subset_ids"].as_array().unwrap().len(), 7);
    assert_eq!(json(&d.join("b1/summary.json"))["method"], "baseline");
    ok(&viewcon(&["baseline", "--config", "cfg.json", "--data", "data", "--views", "joint", "--shots", "all", "--out", "bj"], d));
    assert_eq!(json(&d.join("bj/run_record.json"))["subset_ids"].as_array().unwrap().len(), 21);
    assert_eq!(json(&d.join("bj/summary.json"))["method"], "baseline_joint");
    assert!(d.join("bj/resolved_config.json").is_file());
    let out = viewcon(&["baseline", "--config", "cfg.json", "--data", "data", "--views", "both", "--out", "bx"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_outputs_and_determinism() {
    let ws = workspace();
    let d = ws.path();
    ok(&viewcon(&["baseline", "--config", "cfg.json", "--data", "data", "--shots", "1", "--out", "runs/b"], d));
    ok(&viewcon(&["pretrain", "--config", "cfg.json", "--data", "data", "--out", "runs/p"], d));
    ok(&viewcon(&["finetune", "--checkpoint", "runs/p", "--data", "data", "--shots", "1", "--out", "runs/f"], d));
    ok(&viewcon(&["report", "--runs", "runs", "--out", "r1"], d));
    ok(&viewcon(&["report", "--runs", "runs/b", "runs/f", "runs/p", "--out", "r2"], d));
    for f in ["comparison.csv", "curves.csv", "methods.svg", "f1_vs_shots.svg", "loss_curves.svg", "comparison.json"] {
        let a = std::fs::read(d.join("r1").join(f)).unwrap();
        assert_eq!(a, std::fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
    let svg = std::fs::read_to_string(d.join("r1/methods.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("<metadata>"));
    let table = std::fs::read_to_string(d.join("r1/comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);

    std::fs::create_dir(d.join("empty")).unwrap();
    let out = viewcon(&["report", "--runs", "empty", "--out", "r3"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no runs found"));
}

#[test]
fn experiment_sweeps_seeds_and_shots() {
    let ws = workspace();
    let d = ws.path();
    ok(&viewcon(&["experiment", "--config", "cfg.json", "--data", "data", "--out", "e"], d));
    for s in ["seed0", "seed1"] {
        for run in ["pretrain", "contrastive_k1", "contrastive_k2", "baseline_k1", "baseline_k2"] {
            assert!(d.join("e").join(s).join(run).join("resolved_config.json").is_file(), "{s}/{run}");
        }
    }
    let curves = std::fs::read_to_string(d.join("e/report/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 5);
    let out = viewcon(&["experiment", "--config", "cfg.json", "--data", "data", "--out", "e2", "--seeds", "0,x"], d);
    assert_eq!(out.status.code(), Some(2));
}
