//! End-to-end exercise of the CLI surface against the real binary:
//! train -> calibrate -> eval -> report, plus perturb/attack and the
//! documented exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_taconv"))
}

fn write_small_config(path: &Path) {
    // Reduced desk scale so the whole pipeline runs in about a minute.
    let config = r#"{
        "seed": 11,
        "dataset": {
            "type": "synth",
            "n_per_class_train": 100,
            "n_per_class_test": 80,
            "classes": 4,
            "size": 16,
            "seed": 3000
        },
        "train": { "epochs": 6, "batch_size": 16, "lr": 0.05, "momentum": 0.8, "seed": 11 },
        "calibration": {
            "target_drop": 10.0,
            "tol": 2.0,
            "kinds": ["gaussian_noise", "elastic", "adversarial"]
        }
    }"#;
    std::fs::write(path, config).unwrap();
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_small_config(&cfg);
    let out = dir.path().join("out");
    let std_ckpt = out.join("standard.ckpt");
    let ta_ckpt = out.join("ta.ckpt");

    // Train the standard model.
    let status = bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--save",
            std_ckpt.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(std_ckpt.exists());
    assert!(out.join("run.json").exists());
    assert!(out.join("curve.json").exists());

    // Train a TAConv variant, initialized by weight transfer.
    let status = bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--taconv",
            "elastic",
            "--transfer-from",
            std_ckpt.to_str().unwrap(),
            "--epochs",
            "2",
            "--out",
            out.to_str().unwrap(),
            "--save",
            ta_ckpt.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    // Calibrate severities on the standard model.
    let profile = out.join("profile.json");
    let status = bin()
        .args([
            "calibrate",
            "--config",
            cfg.to_str().unwrap(),
            "--model",
            std_ckpt.to_str().unwrap(),
            "--out",
            profile.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(profile.exists());
    assert!(out.join("standardization.csv").exists());

    // Robustness matrix over both models.
    let eval_out = dir.path().join("eval");
    let status = bin()
        .args([
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--models",
            std_ckpt.to_str().unwrap(),
            ta_ckpt.to_str().unwrap(),
            "--profile",
            profile.to_str().unwrap(),
            "--threads",
            "2",
            "--out",
            eval_out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["matrix.json", "matrix.csv", "matrix.txt"] {
        assert!(eval_out.join(f).exists(), "missing {}", f);
    }

    // Re-emit reports from the matrix JSON; bytes must match the originals.
    let report_out = dir.path().join("report");
    let status = bin()
        .args([
            "report",
            "--input",
            eval_out.join("matrix.json").to_str().unwrap(),
            "--out",
            report_out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read(eval_out.join("matrix.csv")).unwrap(),
        std::fs::read(report_out.join("matrix.csv")).unwrap()
    );

    // Adversarial examples against the trained model.
    let atk_out = dir.path().join("atk");
    let status = bin()
        .args([
            "attack",
            "--config",
            cfg.to_str().unwrap(),
            "--model",
            std_ckpt.to_str().unwrap(),
            "--epsilon",
            "0.02",
            "--out",
            atk_out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(atk_out.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["kind"], "adversarial");
    assert!(manifest["files"].as_array().unwrap().len() > 0);
}

#[test]
fn exit_codes_follow_the_contract() {
    // Usage error: unknown flag.
    let status = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(status.status.code(), Some(1));

    // Usage error: bad perturbation kind.
    let status = bin()
        .args(["perturb", "--kind", "nope", "--severity", "1"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));

    // Data error: missing checkpoint.
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "calibrate",
            "--model",
            dir.path().join("missing.ckpt").to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));

    // Success with --help.
    let status = bin().args(["--help"]).output().unwrap();
    assert_eq!(status.status.code(), Some(0));
}

#[test]
fn perturb_reads_pgm_directory() {
    let dir = tempfile::tempdir().unwrap();
    // Produce a few PGMs via the synth path first.
    let imgs = dir.path().join("imgs");
    std::fs::create_dir_all(&imgs).unwrap();
    let status = bin()
        .args([
            "perturb",
            "--kind",
            "saturation",
            "--severity",
            "0",
            "--out",
            imgs.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    // Now feed that directory back in as input.
    let out = dir.path().join("warped");
    let status = bin()
        .args([
            "perturb",
            "--kind",
            "wave",
            "--severity",
            "1.5",
            "--data",
            imgs.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["mse"].as_f64().unwrap() > 0.0);
}
