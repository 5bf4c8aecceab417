//! End-to-end CLI runs on a tiny synthetic corpus.

use std::path::Path;
use std::process::Command;

use ccnet::checkpoint;
use ccnet::cli::main_with_args;
use ccnet::metrics::read_csv;

const CONFIG: &str = r#"
[synth]
n_cases = 4
dims = [32, 32, 24]
train_count = 3

[data]
labeled_fraction = 0.34

[arch]
base_channels = 2

[train]
max_iteration = 3
labeled_per_batch = 1
unlabeled_per_batch = 1
patch = [32, 32, 16]
checkpoint_every = 2
"#;

fn cli(wd: &Path, args: &[&str]) -> i32 {
    let mut v = vec!["ccnet", "--workdir", wd.to_str().unwrap()];
    v.extend_from_slice(args);
    main_with_args(v)
}

#[test]
fn synth_train_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    std::fs::write(wd.join("c.toml"), CONFIG).unwrap();
    assert_eq!(cli(wd, &["synth", "--config", "c.toml"]), 0);
    assert!(wd.join("data/manifest.json").exists());
    assert_eq!(cli(wd, &["train", "--config", "c.toml", "--run", "r"]), 0);

    let run = wd.join("runs/r");
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 1);
    for name in ["config.toml", "effective.toml", "split.json"] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let ckpts: Vec<_> = std::fs::read_dir(run.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 2, "checkpoints at iterations 2 and 3");
    let last = run.join("checkpoints/iter_000003.safetensors");
    let meta = checkpoint::read_meta(&last).unwrap();
    assert_eq!(meta.iteration, 3);
    let (net, _) = checkpoint::load::<f32>(&last).unwrap();
    assert_eq!(net.arch().base_channels, 2);

    assert_eq!(cli(wd, &["predict", "--config", "c.toml", "--run", "r"]), 0);
    assert_eq!(cli(wd, &["evaluate", "--config", "c.toml", "--run", "r"]), 0);
    let rows = read_csv(&wd.join("results/r/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((0.0..=1.0).contains(&rows[0].dice));
    assert!(wd.join("results/r/aggregate.json").exists());
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["train", "--run", "x"]), 3);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["frobnicate"]), 2);
}

#[test]
fn non_cpu_device_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_ccnet"))
        .args(["--workdir", dir.path().to_str().unwrap(), "synth", "--n-cases", "1"])
        .env("CCNET_DEVICE", "cuda:0")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
