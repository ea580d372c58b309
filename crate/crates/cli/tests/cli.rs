use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tpis::neuralseg::{build_net, read_model, write_model};
use tpis_cli::commands::{cache_paths, cmd_prep, history_path, load_manifest};
use tpis_cli::config::RunConfig;

fn tpis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpis")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small corpus written with the binary itself.
fn corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = tpis(&["synth", "--out", s(&data), "--count", "5", "--height", "32", "--width", "48", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data.join("manifest.jsonl")
}

fn prep(manifest: &Path, cache: &Path) {
    let out = tpis(&["prep", "--manifest", s(manifest), "--out", s(cache)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn selftest_passes_and_is_repeatable() {
    let a = tpis(&["selftest"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    let b = tpis(&["selftest"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn perturbed_backward_fails_selftest_with_code_two() {
    let out = tpis(&["selftest", "--perturb", "conv-backward"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tpis(&["prep", "--out", s(dir.path())]).status.code(), Some(1));
    let missing = dir.path().join("none.jsonl");
    assert_eq!(tpis(&["prep", "--manifest", s(&missing), "--out", s(dir.path())]).status.code(), Some(1));
    assert_eq!(tpis(&["selftest", "--orientations", "1"]).status.code(), Some(1));
    assert_eq!(tpis(&["no-such-command"]).status.code(), Some(1));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 1\n").unwrap();
    assert_eq!(tpis(&["--config", s(&cfg), "selftest"]).status.code(), Some(1));
}

#[test]
fn printed_config_round_trips() {
    let out = tpis(&["config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}

#[test]
fn prep_skips_current_entries_and_redoes_changed_settings() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let index = load_manifest(&manifest).unwrap();
    let cache = dir.path().join("cache");
    let base = RunConfig::default().tensor_pool();
    let first = cmd_prep(&index, &cache, &base).unwrap();
    assert_eq!((first.computed, first.skipped), (5, 0));
    let (png, side) = cache_paths(&cache, &index.records[0].id);
    let stamp = fs::metadata(&png).unwrap().modified().unwrap();
    let again = cmd_prep(&index, &cache, &base).unwrap();
    assert_eq!((again.computed, again.skipped), (0, 5));
    assert_eq!(fs::metadata(&png).unwrap().modified().unwrap(), stamp);
    assert!(side.is_file());
    let changed = cmd_prep(&index, &cache, &tpis::tenpool::TensorPoolConfig { orientations: 6, ..base }).unwrap();
    assert_eq!((changed.computed, changed.skipped), (5, 0));
}

#[test]
fn training_is_reproducible_and_zero_epochs_keeps_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cache = dir.path().join("cache");
    prep(&manifest, &cache);
    let run = |name: &str, epochs: &str| {
        let model = dir.path().join(name);
        let out = tpis(&["train", "--manifest", s(&manifest), "--cache", s(&cache), "--out", s(&model), "--epochs", epochs, "--seed", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        model
    };
    let a = run("a.tpis", "2");
    let b = run("b.tpis", "2");
    let hist = fs::read_to_string(history_path(&a)).unwrap();
    assert_eq!(hist, fs::read_to_string(history_path(&b)).unwrap());
    assert_eq!(hist.lines().next(), Some("epoch,train_loss,validation_loss"));
    assert_eq!(hist.lines().count(), 3);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let z = read_model(&run("z.tpis", "0")).unwrap();
    let (init, _) = build_net::<f32>(&z.spec, 2).unwrap();
    assert_eq!(z.params, init);
    assert_eq!(z.metadata.epochs, 0);
}

#[test]
fn training_without_cache_names_the_missing_ids() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let out = tpis(&["train", "--manifest", s(&manifest), "--cache", s(&dir.path().join("empty")), "--out", s(&dir.path().join("m.tpis"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("syn0000") && err.contains("syn0003"), "{err}");
}

#[test]
fn inference_is_deterministic_and_blank_scans_yield_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cache = dir.path().join("cache");
    prep(&manifest, &cache);
    let model = dir.path().join("m.tpis");
    let out = tpis(&["train", "--manifest", s(&manifest), "--cache", s(&cache), "--out", s(&model), "--epochs", "3"]);
    assert!(out.status.success());

    let infer = |extra: &[&str], name: &str| {
        let p = dir.path().join(name);
        let mut args = vec!["infer", "--model", s(&model), "--out", s(&p)];
        args.extend_from_slice(extra);
        let out = tpis(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(&p).unwrap()
    };
    let m = s(&manifest);
    let fresh = infer(&["--manifest", m, "--split", "all"], "p1.json");
    assert_eq!(fresh, infer(&["--manifest", m, "--split", "all"], "p2.json"));
    // Cached and freshly computed maps agree.
    let c = s(&cache);
    assert_eq!(fresh, infer(&["--manifest", m, "--split", "all", "--cache", c], "p1.json"));

    let blank = dir.path().join("blank.png");
    image::GrayImage::from_pixel(48, 32, image::Luma([128])).save(&blank).unwrap();
    let preds: serde_json::Value = serde_json::from_str(&infer(&["--image", s(&blank)], "blank.json")).unwrap();
    assert_eq!(preds, serde_json::json!([{"id": "blank", "detections": []}]));
}

#[test]
fn version_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cache = dir.path().join("cache");
    prep(&manifest, &cache);
    let model = dir.path().join("m.tpis");
    assert!(tpis(&["train", "--manifest", s(&manifest), "--cache", s(&cache), "--out", s(&model), "--epochs", "0"]).status.success());
    let mut bytes = fs::read(&model).unwrap();
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&model, &bytes).unwrap();
    let out = tpis(&["infer", "--model", s(&model), "--manifest", s(&manifest), "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 7"));

    let good = read_model(&dir.path().join("m.tpis"));
    assert!(good.is_err());
    let mut fixed = bytes.clone();
    fixed[4..8].copy_from_slice(&1u32.to_le_bytes());
    fs::write(&model, &fixed).unwrap();
    let m = read_model(&model).unwrap();
    let again = dir.path().join("again.tpis");
    write_model(&m, &again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fixed);
}

#[test]
fn eval_rejects_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let preds = dir.path().join("p.json");
    fs::write(&preds, r#"[{"id":"nope","detections":[]}]"#).unwrap();
    let out = tpis(&["eval", "--predictions", s(&preds), "--manifest", s(&manifest), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
