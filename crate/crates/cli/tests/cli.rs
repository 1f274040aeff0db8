//! End-to-end tests of the `meshfit` binary: the full pipeline on a tiny
//! synthetic dataset, and the documented exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn meshfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshfit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = meshfit(args);
    assert!(
        out.status.success(),
        "meshfit {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> String {
    p.to_str().expect("utf-8 path").to_owned()
}

fn line_count(p: &Path) -> usize {
    fs::read_to_string(p).expect("readable").lines().count()
}

/// A small but complete training configuration; iteration counts are tiny so
/// the whole pipeline runs in seconds.
const TRAIN_CONFIG: &str = r#"{
    "optimizer": {
        "step_size": 3e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "shape_iters": 40,
        "texture_iters": 10,
        "batch_size": 3,
        "seed": 5,
        "sigma_decay": 0.5,
        "sigma_decay_every": 20
    }
}"#;

#[test]
fn pipeline_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let manifest = data.join("manifest.json");
    let sidecar = data.join("ground_truth.json");

    // synth
    let out = run_ok(&[
        "synth",
        "--out",
        &s(&data),
        "--seed",
        "11",
        "--instances",
        "6",
        "--size",
        "32",
        "--amplitude",
        "0.05",
    ]);
    assert!(out.contains("6 instances"), "synth output: {out}");
    assert!(manifest.is_file() && sidecar.is_file());

    // sfm
    let sfm_json = dir.path().join("sfm.json");
    let out = run_ok(&["sfm", "--data", &s(&manifest), "--out", &s(&sfm_json)]);
    assert!(out.contains("factorized 6 instances"), "sfm output: {out}");
    let sfm: serde_json::Value = serde_json::from_str(&fs::read_to_string(&sfm_json).unwrap()).unwrap();
    assert_eq!(sfm["cameras"].as_array().unwrap().len(), 6);

    // train (both stages)
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, TRAIN_CONFIG).unwrap();
    let train_dir = dir.path().join("train");
    let out = run_ok(&[
        "train",
        "--data",
        &s(&manifest),
        "--out",
        &s(&train_dir),
        "--stage",
        "all",
        "--config",
        &s(&cfg),
    ]);
    assert!(out.contains("shape stage: 40 steps"), "train output: {out}");
    assert!(out.contains("texture stage: 10 steps"), "train output: {out}");
    let ckpt = train_dir.join("checkpoint.bin");
    assert!(ckpt.is_file());
    assert_eq!(line_count(&train_dir.join("trace_shape.jsonl")), 40);
    assert_eq!(line_count(&train_dir.join("trace_texture.jsonl")), 10);

    // resume for a few more shape steps: the checkpoint is accepted and
    // step counters continue rather than restart.
    let resume_dir = dir.path().join("resume");
    let out = run_ok(&[
        "train",
        "--data",
        &s(&manifest),
        "--out",
        &s(&resume_dir),
        "--stage",
        "shape",
        "--config",
        &s(&cfg),
        "--checkpoint",
        &s(&ckpt),
    ]);
    assert!(out.contains("resumed"), "resume output: {out}");
    let first: serde_json::Value = fs::read_to_string(resume_dir.join("trace_shape.jsonl"))
        .unwrap()
        .lines()
        .next()
        .map(|l| serde_json::from_str(l).unwrap())
        .unwrap();
    assert_eq!(first["step"], 40, "resume continues the step counter");

    // eval with ground truth
    let metrics = dir.path().join("metrics.json");
    let out = run_ok(&[
        "eval",
        "--checkpoint",
        &s(&ckpt),
        "--data",
        &s(&manifest),
        "--out",
        &s(&metrics),
        "--sidecar",
        &s(&sidecar),
    ]);
    assert!(out.contains("mean IoU"), "eval output: {out}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let iou = report["mean_iou_sfm"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou), "IoU {iou} out of range");
    assert_eq!(report["gt_vertex_rmse"].as_array().unwrap().len(), 6);

    // render the turntable views
    let renders = dir.path().join("renders");
    run_ok(&[
        "render",
        "--checkpoint",
        &s(&ckpt),
        "--data",
        &s(&manifest),
        "--index",
        "0",
        "--out",
        &s(&renders),
        "--size",
        "64",
    ]);
    for name in [
        "view_00_0deg.ppm",
        "view_01_60deg.ppm",
        "view_02_180deg.ppm",
        "view_03_-60deg.ppm",
    ] {
        assert!(renders.join(name).is_file(), "missing {name}");
    }

    // deformation modes
    let pca_dir = dir.path().join("pca");
    run_ok(&[
        "pca",
        "--checkpoint",
        &s(&ckpt),
        "--out",
        &s(&pca_dir),
        "--modes",
        "2",
    ]);
    for name in ["mode0_plus.obj", "mode0_minus.obj", "mode1_plus.obj", "mode1_minus.obj"] {
        assert!(pca_dir.join(name).is_file(), "missing {name}");
    }
    let pca: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(pca_dir.join("pca.json")).unwrap()).unwrap();
    let eigen = pca["eigenvalues"].as_array().unwrap();
    assert_eq!(eigen.len(), 2);
    assert!(eigen[0].as_f64().unwrap() >= eigen[1].as_f64().unwrap());

    // texture transfer
    let transfer = dir.path().join("transfer.ppm");
    run_ok(&[
        "transfer",
        "--checkpoint",
        &s(&ckpt),
        "--data",
        &s(&manifest),
        "--shape",
        "0",
        "--texture",
        "1",
        "--out",
        &s(&transfer),
        "--size",
        "64",
    ]);
    assert!(transfer.is_file());

    // fit one instance against the trained model
    let fit_dir = dir.path().join("fit");
    run_ok(&[
        "fit",
        "--checkpoint",
        &s(&ckpt),
        "--data",
        &s(&manifest),
        "--index",
        "1",
        "--out",
        &s(&fit_dir),
        "--config",
        &s(&cfg),
    ]);
    for name in ["fitted.obj", "fitted.mtl", "fitted.ppm", "camera.json"] {
        assert!(fit_dir.join(name).is_file(), "missing {name}");
    }
    assert_eq!(line_count(&fit_dir.join("trace_shape.jsonl")), 40);
    assert_eq!(line_count(&fit_dir.join("trace_texture.jsonl")), 10);
    let cam: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fit_dir.join("camera.json")).unwrap()).unwrap();
    assert!(cam["camera"]["s"].as_f64().unwrap() > 0.0);
}

#[test]
fn usage_errors_exit_one() {
    let out = meshfit(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    let out = meshfit(&["train"]); // missing required flags
    assert_eq!(out.status.code(), Some(1));
    // --help is not a failure
    let out = meshfit(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = meshfit(&[
        "sfm",
        "--data",
        &s(&dir.path().join("missing/manifest.json")),
        "--out",
        &s(&dir.path().join("sfm.json")),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // corrupt checkpoint
    let ckpt = dir.path().join("checkpoint.bin");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = meshfit(&[
        "pca",
        "--checkpoint",
        &s(&ckpt),
        "--out",
        &s(&dir.path().join("pca")),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn numeric_failures_exit_three() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    run_ok(&[
        "synth",
        "--out",
        &s(&data),
        "--seed",
        "3",
        "--instances",
        "4",
        "--size",
        "32",
        "--amplitude",
        "0.05",
    ]);
    // A step size this large blows the parameters up on the first update;
    // the next evaluation sees a non-finite loss and must report a numeric
    // failure, not a crash.
    let cfg = dir.path().join("config.json");
    fs::write(
        &cfg,
        r#"{"optimizer": {
            "step_size": 1e300,
            "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8,
            "shape_iters": 5, "texture_iters": 0,
            "batch_size": 2, "seed": 0,
            "sigma_decay": 1.0, "sigma_decay_every": 100
        }}"#,
    )
    .unwrap();
    let out = meshfit(&[
        "train",
        "--data",
        &s(&data.join("manifest.json")),
        "--out",
        &s(&dir.path().join("train")),
        "--stage",
        "shape",
        "--config",
        &s(&cfg),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
