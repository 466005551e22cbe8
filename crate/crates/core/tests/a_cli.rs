use std::path::Path;
use std::process::{Command, Output};

use ronin::degrade::Dataset;
use ronin::model::checkpoint::{Checkpoint, CheckpointMeta};
use ronin::model::Restorer;
use ronin::rng::derive_seed;
use ronin::train::STREAM_INIT;

fn ronin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ronin"))
        .args(args)
        .current_dir(dir)
        .env_remove("RONIN_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ronin(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// 2 clips x 5 frames of 16x16, grounded with the mock client (d=16).
fn pipeline(dir: &Path) {
    ok(dir, &["sources", "--out", "src", "--clips", "2", "--frames", "5", "--height", "16", "--width", "16"]);
    ok(dir, &["synth", "--protocol", "TUD", "--src", "src", "--out", "ds", "--seed", "1", "--t", "2"]);
    let first = ok(dir, &["ground", "--dataset", "ds", "--d", "16"]);
    assert!(first.contains("10 records") && first.contains("10 grounded"), "{first}");
}

#[test]
fn mock_pipeline_grounds_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    let again = ok(dir, &["ground", "--dataset", "ds", "--d", "16"]);
    assert!(again.contains("0 grounded, 10 reused"), "{again}");
    assert!(dir.join("ds/store/ground.resolved.toml").exists());
    assert!(dir.join("ds/synth.resolved.toml").exists());

    let bad = ronin(dir, &["ground", "--dataset", "ds", "--client", "socket:127.0.0.1:1", "--store", "s2", "--retries", "0"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("transport"));
}

#[test]
fn train_flags_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);

    ok(dir, &["train", "--dataset", "ds", "--out", "init", "--iters", "0", "--seed", "7"]);
    let ck = Checkpoint::load(&dir.join("init/final.ckpt")).unwrap();
    let init = Restorer::init(ck.config.clone(), derive_seed(7, &[STREAM_INIT])).unwrap();
    let want = Checkpoint::from_restorer(&init, CheckpointMeta::default());
    assert_eq!(ck.params, want.params);
    assert_eq!(ck.meta.step, 0);

    let args = ["train", "--dataset", "ds", "--iters", "2", "--crop", "16", "--seed", "3"];
    ok(dir, &[&args[..], &["--out", "a"]].concat());
    ok(dir, &[&args[..], &["--out", "b"]].concat());
    ok(dir, &["train", "--config", "a/train.resolved.toml", "--out", "c"]);
    let a = std::fs::read(dir.join("a/final.ckpt")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("b/final.ckpt")).unwrap());
    assert_eq!(a, std::fs::read(dir.join("c/final.ckpt")).unwrap());

    ok(dir, &[&args[..], &["--out", "np", "--no-prompt", "--no-history"]].concat());
    let np = Checkpoint::load(&dir.join("np/final.ckpt")).unwrap();
    assert!(np.config.injection_sites.is_empty());
    assert_eq!(np.config.history_mode, ronin::model::HistoryMode::None);
    let resolved = std::fs::read_to_string(dir.join("np/train.resolved.toml")).unwrap();
    assert!(resolved.contains("lambda2 = 0.0"), "{resolved}");

    ok(dir, &[&args[..], &["--out", "first", "--injection", "first"]].concat());
    let first = Checkpoint::load(&dir.join("first/final.ckpt")).unwrap();
    assert_eq!(first.config.injection_sites, vec![0]);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["sources", "--out", "src", "--clips", "1", "--frames", "2", "--height", "16", "--width", "16"]);
    let out = Command::new(env!("CARGO_BIN_EXE_ronin"))
        .args(["synth", "--src", "src", "--out", "ds"])
        .current_dir(dir)
        .env("RONIN_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(Dataset::open(&dir.join("ds")).unwrap().manifest.seed, 42);
    let bad = Command::new(env!("CARGO_BIN_EXE_ronin"))
        .args(["synth", "--src", "src", "--out", "ds2"])
        .current_dir(dir)
        .env("RONIN_SEED", "forty-two")
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn eval_analyses_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    ok(dir, &["train", "--dataset", "ds", "--out", "run", "--iters", "1", "--crop", "16"]);
    let ck = ["--checkpoint", "run/final.ckpt", "--dataset", "ds", "--out", "ev"];
    let table = ok(dir, &[&["eval"][..], &ck].concat());
    assert!(table.contains("Input") && table.contains("TUD t=2"), "{table}");
    ok(dir, &[&["eval"][..], &ck, &["--analysis", "perturb", "--sigma", "1"]].concat());
    let text = ok(dir, &[&["eval"][..], &ck, &["--analysis", "alignment"]].concat());
    assert!(text.contains("gap"));
    ok(dir, &[&["eval"][..], &ck, &["--analysis", "export"]].concat());
    for f in ["metrics.json", "metrics.csv", "perturb.json", "alignment.json", "prompts/store.json", "eval.resolved.toml"] {
        assert!(dir.join("ev").join(f).exists(), "{f}");
    }
    let missing = ronin(dir, &["eval", "--checkpoint", "nope.ckpt", "--dataset", "ds", "--out", "ev2"]);
    assert!(!missing.status.success());
}
