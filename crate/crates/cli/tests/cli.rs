use std::path::Path;
use std::process::{Command, Output};

use a3gan_core::checkpoint::Checkpoint;
use a3gan_core::config::RunConfig;
use a3gan_core::generator::Profile;

fn a3gan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a3gan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A 32px, 6-identity configuration that trains in seconds.
fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig::for_profile(Profile::Desk64, 2);
    cfg.synth.image_size = 32;
    cfg.synth.n_identities = 6;
    cfg.generator.image_size = 32;
    cfg.discriminator.image_size = 32;
    cfg.train.iterations = Some(3);
    let path = dir.join("small.json");
    cfg.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn zero_epochs_writes_an_initial_checkpoint_and_the_output_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = a3gan(&["train", "--epochs", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "ckpt/final.ckpt", "logs/metrics.csv", "report.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert!(out.join("samples").is_dir());
    let ck = Checkpoint::load(&out.join("ckpt/final.ckpt")).unwrap();
    assert_eq!(ck.metadata["step"], 0);
    assert_eq!(ck.metadata["subband_order"], serde_json::json!(["LL", "LH", "HL", "HH"]));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = a3gan(&["generate", "--ckpt", "missing.ckpt", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("i/o error"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&a3gan(&["frobnicate"])), 2);
    assert_eq!(code(&a3gan(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&a3gan(&["train", "--profile", "desk-32"])), 2);
    assert_eq!(code(&a3gan(&["ablate", "--variant", "w/o-am"])), 2);
    assert_eq!(code(&a3gan(&[])), 2);
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::for_profile(Profile::Desk64, 2);
    cfg.schema_version = 99;
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = a3gan(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("schema_version"), "{}", stderr(&o));

    std::fs::write(&path, "{ not json").unwrap();
    let o = a3gan(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn ablate_no_am_drops_the_mask_head() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("noam");
    let o = a3gan(&["ablate", "--variant", "no-am", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let saved = RunConfig::load(&out.join("config.json")).unwrap();
    assert!(!saved.generator.attention);
    let ck = Checkpoint::load(&out.join("ckpt/final.ckpt")).unwrap();
    assert!(ck.tensors.keys().all(|k| !k.contains("mask_head")));
    assert!(ck.tensors.contains_key("generator/image_head/weight"));
    assert!(!out.join("samples/attention.png").exists());
}

#[test]
fn rerunning_the_written_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = a3gan(&["train", "--config", &cfg, "--seed", "4", "--deterministic", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let written = a.join("config.json");
    let o = a3gan(&["train", "--config", written.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = |d: &Path| std::fs::read(d.join("logs/metrics.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(csv(&a).iter().filter(|&&c| c == b'\n').count(), 4);
    assert!(RunConfig::load(&written).unwrap().deterministic);
}

#[test]
fn synthetic_export_feeds_training_generation_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let o = a3gan(&["synth-data", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(data.join("manifest.csv").exists());

    let run = dir.path().join("run");
    let o = a3gan(&[
        "train", "--config", &cfg, "--data", data.to_str().unwrap(), "--iterations", "2", "--out", run.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = run.join("ckpt/final.ckpt");

    let gen = dir.path().join("gen");
    let o = a3gan(&[
        "generate", "--ckpt", ckpt.to_str().unwrap(), "--input", data.to_str().unwrap(), "--attrs", "1,0", "--out",
        gen.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(gen.join("samples/grid.png").exists());
    assert!(gen.join("samples/attention.png").exists());

    let ev = dir.path().join("eval");
    let o = a3gan(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--config", &cfg, "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["groups"]["G51Plus"]["verification"]["rate"].is_number());
    assert!(String::from_utf8_lossy(&o.stdout).contains("Face verification"));

    let o = a3gan(&["generate", "--ckpt", ckpt.to_str().unwrap(), "--attrs", "1", "--out", gen.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn wpt_reports_level_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(code(&a3gan(&["synth-data", "--config", &cfg, "--identities", "1", "--out", data.to_str().unwrap()])), 0);
    let png = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "png"))
        .unwrap();
    let out = dir.path().join("wpt");
    let o = a3gan(&["wpt", "--input", png.to_str().unwrap(), "--levels", "2", "--size", "32", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["levels"][1]["shape"], serde_json::json!([16, 16, 12]));
    assert_eq!(v["levels"][2]["shape"], serde_json::json!([8, 8, 48]));
    assert!(v["reconstruction_max_abs_error"].as_f64().unwrap() < 1e-9);
    assert!(out.join("level2.png").exists());
    assert_eq!(code(&a3gan(&["wpt", "--input", png.to_str().unwrap(), "--filter", "sym9"])), 1);
}
