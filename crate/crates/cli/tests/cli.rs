//! CLI contract tests: flags, exit codes, config precedence, determinism.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tsdistill"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_env(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.env_remove("TD_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn prepare_small(dir: &Path) {
    let out = run(&[
        "prepare",
        "--out",
        dir.to_str().unwrap(),
        "--synthetic",
        "periods=12,48",
        "--length",
        "1200",
        "--channels",
        "2",
        "--noise-std",
        "0.2",
        "--seed",
        "3",
        "--lookback",
        "64",
        "--horizon",
        "32",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_lists_subcommands_and_flags() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["prepare", "train-teacher", "distill", "eval", "analyze", "gradcheck", "verify-theorems"] {
        assert!(text.contains(sub), "missing {sub} in top-level help");
    }
    let out = run(&["distill", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--alpha", "--beta", "--tau", "--epochs", "--batch-size", "--lr", "--patience", "--seed",
        "--no-pred-level", "--no-feat-level", "--no-multi-scale", "--no-multi-period", "--no-sup",
        "--gt-pattern", "--teacher", "--config",
    ] {
        assert!(text.contains(flag), "missing {flag} in distill help");
    }
    for default in ["0.1", "0.5", "3", "32", "0.01", "5", "20"] {
        assert!(text.contains(default), "missing default {default} in distill help");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["prepare", "--does-not-exist"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_file_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "prepare",
        "--out",
        dir.path().to_str().unwrap(),
        "--data",
        "/nonexistent/file.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_manifest_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prepare_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    prepare_small(a.path());
    prepare_small(b.path());
    let ma = std::fs::read(a.path().join("manifest.json")).unwrap();
    let mb = std::fs::read(b.path().join("manifest.json")).unwrap();
    assert_eq!(ma, mb, "manifest bytes differ between identical runs");
    let da = std::fs::read(a.path().join("dataset.csv")).unwrap();
    let db = std::fs::read(b.path().join("dataset.csv")).unwrap();
    assert_eq!(da, db, "dataset bytes differ between identical runs");
}

#[test]
fn manifest_window_counts_match_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    prepare_small(dir.path());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    // L=1200 at 0.7/0.1/0.2: segments 840/120/240; N = L_seg - T - S + 1
    assert_eq!(manifest["windows"]["train"], 840 - 64 - 32 + 1);
    assert_eq!(manifest["windows"]["val"], 120 - 64 - 32 + 1);
    assert_eq!(manifest["windows"]["test"], 240 - 64 - 32 + 1);
}

#[test]
fn td_seed_env_overrides_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_env(
        &[
            "prepare",
            "--out",
            dir.path().to_str().unwrap(),
            "--synthetic",
            "periods=12",
            "--length",
            "600",
            "--channels",
            "1",
            "--lookback",
            "24",
            "--horizon",
            "12",
        ],
        &[("TD_SEED", "99")],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("seed=99"), "{manifest}");
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    prepare_small(dir.path());
    let teach = run(&[
        "train-teacher",
        "--out",
        dir.path().to_str().unwrap(),
        "--teacher",
        "oracle:sigma=0.1",
        "--d-t",
        "16",
    ]);
    assert!(teach.status.success(), "{}", String::from_utf8_lossy(&teach.stderr));

    let cfg_path = dir.path().join("run.conf");
    std::fs::write(&cfg_path, "alpha = 1.5\nbeta = 1.25\nepochs = 1\nd = 16\nm = 2\n").unwrap();
    let out = run(&[
        "distill",
        "--out",
        dir.path().to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--alpha",
        "0.25",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echoed["alpha"], 0.25); // flag wins
    assert_eq!(echoed["beta"], 1.25); // file wins over default
    assert_eq!(echoed["epochs"], 1);
    assert_eq!(echoed["tau"], 0.5); // untouched default
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    prepare_small(dir.path());
    let cfg_path = dir.path().join("run.conf");
    std::fs::write(&cfg_path, "alhpa = 1.5\n").unwrap();
    let out = run(&[
        "distill",
        "--out",
        dir.path().to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ecl_style_flags_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    prepare_small(dir.path());
    let teach = run(&[
        "train-teacher",
        "--out",
        dir.path().to_str().unwrap(),
        "--teacher",
        "oracle:sigma=0.1",
        "--d-t",
        "16",
    ]);
    assert!(teach.status.success());
    let out = run(&[
        "distill",
        "--out",
        dir.path().to_str().unwrap(),
        "--alpha",
        "0.1",
        "--beta",
        "0.5",
        "--tau",
        "0.5",
        "-M",
        "3",
        "-D",
        "512",
        "--epochs",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echoed["alpha"], 0.1);
    assert_eq!(echoed["beta"], 0.5);
    assert_eq!(echoed["tau"], 0.5);
    assert_eq!(echoed["m"], 3);
    assert_eq!(echoed["d"], 512);
    assert_eq!(echoed["norm"], "non-stationary");
}

#[test]
fn locked_output_directory_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".tsdistill.lock"), b"").unwrap();
    let out = run(&[
        "prepare",
        "--out",
        dir.path().to_str().unwrap(),
        "--synthetic",
        "periods=12",
        "--length",
        "300",
        "--channels",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("lock"), "{text}");
}

#[test]
fn eval_reproduces_train_report_test_mse() {
    let dir = tempfile::tempdir().unwrap();
    prepare_small(dir.path());
    let teach = run(&[
        "train-teacher",
        "--out",
        dir.path().to_str().unwrap(),
        "--teacher",
        "linear:lambda=0.001",
        "--d-t",
        "16",
    ]);
    assert!(teach.status.success(), "{}", String::from_utf8_lossy(&teach.stderr));
    let out = run(&[
        "distill",
        "--out",
        dir.path().to_str().unwrap(),
        "-D",
        "24",
        "-M",
        "2",
        "--epochs",
        "2",
        "--seed",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = run(&["eval", "--out", dir.path().to_str().unwrap(), "--split", "test"]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train_report.json")).unwrap()).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics_test.json")).unwrap()).unwrap();
    let a = report["test_mse"].as_f64().unwrap();
    let b = metrics["mse"].as_f64().unwrap();
    assert!((a - b).abs() < 1e-9, "report {a} vs eval {b}");
}

#[test]
fn analyze_writes_win_stats_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    prepare_small(dir.path());
    assert!(run(&[
        "train-teacher",
        "--out",
        dir.path().to_str().unwrap(),
        "--teacher",
        "oracle:sigma=2.0",
        "--d-t",
        "16",
    ])
    .status
    .success());
    // distilled and plain students
    assert!(run(&[
        "distill",
        "--out",
        dir.path().to_str().unwrap(),
        "-D",
        "24",
        "-M",
        "2",
        "--epochs",
        "2",
    ])
    .status
    .success());
    let plain_ckpt = dir.path().join("student_plain.tdstu");
    std::fs::rename(dir.path().join("student.tdstu"), &plain_ckpt).unwrap();
    assert!(run(&[
        "distill",
        "--out",
        dir.path().to_str().unwrap(),
        "-D",
        "24",
        "-M",
        "2",
        "--epochs",
        "3",
    ])
    .status
    .success());
    let out = run(&[
        "analyze",
        "--out",
        dir.path().to_str().unwrap(),
        "--baseline-checkpoint",
        plain_ckpt.to_str().unwrap(),
        "-M",
        "2",
        "--sample",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let analysis: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("analysis_test.json")).unwrap()).unwrap();
    assert!(analysis["win_ratio"].is_number());
    assert!(analysis["win_keep"].is_number());
    assert!(dir.path().join("pyramid.csv").exists());
    assert!(dir.path().join("spectrogram.csv").exists());
    // pyramid rows: (32+16+8)·C·... levels of horizon 32 with M=2 -> 56 rows per channel
    let pyramid = std::fs::read_to_string(dir.path().join("pyramid.csv")).unwrap();
    assert_eq!(pyramid.lines().count() - 1, (32 + 16 + 8) * 2);
}

#[test]
fn artifact_header_echoes_manifest_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    prepare_small(dir.path());
    let out = run(&[
        "train-teacher",
        "--out",
        dir.path().to_str().unwrap(),
        "--teacher",
        "oracle:sigma=0",
        "--d-t",
        "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let artifact =
        tsdistill_core::teacher::load_teacher_artifact::<f64>(dir.path().join("teacher_train.tdt1")).unwrap();
    assert_eq!(artifact.header.t as u64, manifest["lookback"].as_u64().unwrap());
    assert_eq!(artifact.header.s as u64, manifest["horizon"].as_u64().unwrap());
    assert_eq!(artifact.header.c, manifest["channels"].as_array().unwrap().len());
    assert_eq!(artifact.header.d_t, 8);
    assert_eq!(artifact.header.n as u64, manifest["windows"]["train"].as_u64().unwrap());

    // zero-noise oracle: loaded predictions equal ground truth at f32 precision
    let (ds, _) = {
        use tsdistill_core::dataio::SeriesDataset;
        let ds = SeriesDataset::<f64>::load_csv(dir.path().join("dataset.csv")).unwrap();
        let ds = ds
            .with_restored_state(
                (
                    manifest["train_end"].as_u64().unwrap() as usize,
                    manifest["val_end"].as_u64().unwrap() as usize,
                ),
                ndarray::Array1::from_vec(
                    manifest["train_mean"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect(),
                ),
                ndarray::Array1::from_vec(
                    manifest["train_std"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect(),
                ),
                true,
            )
            .unwrap();
        (ds, ())
    };
    let n = artifact.header.n;
    let windows = ds
        .gather_windows(tsdistill_core::dataio::Split::Train, 64, 32, &(0..n).collect::<Vec<_>>())
        .unwrap();
    for (a, b) in artifact.outputs.y_hat.iter().zip(windows.y.iter()) {
        assert_eq!(*a, (*b as f32) as f64);
    }
}

#[test]
fn verify_theorems_and_gradcheck_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "verify-theorems",
        "--out",
        dir.path().to_str().unwrap(),
        "--trials",
        "10000",
        "--seed",
        "7",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("theorems.json").exists());

    let dir2 = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--out", dir2.path().to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir2.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
}
