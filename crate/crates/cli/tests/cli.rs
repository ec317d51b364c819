//! End-to-end tests of the `drbn` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drbn_core::net::NetworkSpec;
use drbn_core::persistence;
use drbn_core::rng::RngStream;

fn drbn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drbn"))
        .args(args)
        .output()
        .expect("spawning the drbn binary")
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("drbn-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        "synthetic:80:5",
        "--arch",
        "dense:24",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "--k",
        "2",
        "--particles",
        "12",
        "--batch",
        "16",
        "--heldout",
        "16",
        "--sample-every",
        "0",
        "--checkpoint-every",
        "0",
    ];
    args.extend_from_slice(extra);
    drbn(&args)
}

#[test]
fn train_writes_model_and_log_then_inspect_reads_it() {
    let dir = tmpdir("train");
    let out = train_tiny(&dir, &[]);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let model = dir.join("model.drbn");
    assert!(model.exists());
    let log = fs::read_to_string(dir.join("train.log")).unwrap();
    assert!(log.contains("epoch_end epoch=0"), "log was: {log}");
    assert!(log.contains("fe_gap="));

    let out = drbn(&["inspect", "--model", model.to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("dense 784 -> 24"), "{stdout}");
    assert!(stdout.contains("total weights: 18816"), "{stdout}");
    assert!(stdout.contains("probe free energy"), "{stdout}");
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tmpdir("epochs0");
    let out = train_tiny(&dir, &["--epochs", "0"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let saved = persistence::load_model(&dir.join("model.drbn")).unwrap();
    // Stream label 0 is reserved for weight init by the CLI.
    let expect = NetworkSpec::parse("dense:24", [28, 28, 1])
        .unwrap()
        .build(&RngStream::from_seed(9).split(0))
        .unwrap();
    assert_eq!(saved, expect);
}

#[test]
fn generate_is_byte_deterministic_per_seed() {
    let dir = tmpdir("generate");
    assert!(train_tiny(&dir, &["--epochs", "0"]).status.success());
    let model = dir.join("model.drbn");
    let a = dir.join("a.pgm");
    let b = dir.join("b.pgm");
    for path in [&a, &b] {
        let out = drbn(&[
            "generate",
            "--model",
            model.to_str().unwrap(),
            "--out",
            path.to_str().unwrap(),
            "--seed",
            "3",
            "--steps",
            "4",
            "--count",
            "6",
            "--cols",
            "3",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    // Single-step generation is a valid smoke test.
    let out = drbn(&[
        "generate",
        "--model",
        model.to_str().unwrap(),
        "--out",
        dir.join("one.pgm").to_str().unwrap(),
        "--seed",
        "4",
        "--steps",
        "1",
        "--count",
        "1",
        "--cols",
        "1",
    ]);
    assert!(out.status.success());
    let bytes = fs::read(dir.join("one.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n28 28\n255\n"));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = drbn(&["train", "--arch", "dense:8", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--data"), "{err}");
    assert!(err.to_lowercase().contains("help"), "{err}");
}

#[test]
fn zero_labels_is_a_usage_error() {
    let out = drbn(&[
        "semisup", "--model", "x.drbn", "--data", "synthetic:50:1", "--labels", "0", "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_model_file_is_a_runtime_error() {
    let dir = tmpdir("corrupt");
    let path = dir.join("junk.drbn");
    let mut bytes = {
        let dir2 = tmpdir("corrupt-src");
        assert!(train_tiny(&dir2, &["--epochs", "0"]).status.success());
        fs::read(dir2.join("model.drbn")).unwrap()
    };
    let n = bytes.len();
    bytes[n / 2] ^= 0xFF;
    fs::write(&path, &bytes).unwrap();
    let out = drbn(&["inspect", "--model", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn resume_from_checkpoint_matches_straight_run() {
    let straight = tmpdir("straight");
    let out = train_tiny(&straight, &["--epochs", "2"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let half = tmpdir("half");
    let out = train_tiny(&half, &["--epochs", "2", "--checkpoint-every", "1"]);
    assert!(out.status.success());
    // Re-run the final epoch from the on-disk checkpoint: the checkpoint at
    // epoch 2 is final, so resume it into a fresh directory and compare.
    let resumed = tmpdir("resumed");
    let out = drbn(&[
        "train",
        "--data",
        "synthetic:80:5",
        "--out",
        resumed.to_str().unwrap(),
        "--resume",
        half.join("checkpoint.drbnck").to_str().unwrap(),
        "--sample-every",
        "0",
        "--checkpoint-every",
        "0",
        "--heldout",
        "16",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read(straight.join("model.drbn")).unwrap(),
        fs::read(resumed.join("model.drbn")).unwrap()
    );
}

#[test]
fn semisup_emits_per_run_and_summary_records() {
    let dir = tmpdir("semisup");
    assert!(train_tiny(&dir, &[]).status.success());
    let metrics = dir.join("metrics.log");
    let out = drbn(&[
        "semisup",
        "--model",
        dir.join("model.drbn").to_str().unwrap(),
        "--data",
        "synthetic:120:5",
        "--labels",
        "40",
        "--runs",
        "2",
        "--phase",
        "frozen",
        "--epochs",
        "15",
        "--seed",
        "11",
        "--out",
        metrics.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&metrics).unwrap();
    let runs: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("labels_used=40"))
        .collect();
    assert_eq!(runs.len(), 2, "{text}");
    assert!(runs.iter().all(|l| l.contains("phase=frozen")));
    assert!(text.lines().any(|l| l.starts_with("summary ")), "{text}");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tmpdir("config");
    let cfg = dir.join("run.conf");
    fs::write(
        &cfg,
        format!(
            "# tiny run\ndata=synthetic:80:5\narch=dense:24\nout={}\nseed=9\nepochs=1\nk=2\nparticles=12\nbatch=16\nheldout=16\nsample-every=0\ncheckpoint-every=0\n",
            dir.to_str().unwrap()
        ),
    )
    .unwrap();
    // Flag overrides epochs to 0: the saved model must equal initialization.
    let out = drbn(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "0"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let saved = persistence::load_model(&dir.join("model.drbn")).unwrap();
    let expect = NetworkSpec::parse("dense:24", [28, 28, 1])
        .unwrap()
        .build(&RngStream::from_seed(9).split(0))
        .unwrap();
    assert_eq!(saved, expect);
}
