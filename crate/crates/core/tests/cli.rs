//! The four subcommands end to end on a tiny phantom dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;

use recon_glgan::cli::*;
use recon_glgan::data::SplitRole;
use recon_glgan::trainer::SegEvalRow;
use recon_glgan::Error;

fn parse(args: &[&str]) -> Command {
    Cli::try_parse_from(std::iter::once("reconglgan").chain(args.iter().copied()))
        .unwrap()
        .command
}

fn prepare(root: &Path, n: usize) -> Vec<(SplitRole, usize)> {
    let Command::Prepare(a) = parse(&["prepare", "--out", root.to_str().unwrap(), "--phantom", &n.to_string()]) else {
        unreachable!()
    };
    cmd_prepare(&a).unwrap()
}

fn train_args(data: &Path, runs: &Path, extra: &[&str]) -> TrainArgs {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "2",
        "--depth",
        "2",
        "--base-channels",
        "4",
    ];
    args.extend_from_slice(extra);
    let Command::Train(a) = parse(&args) else { unreachable!() };
    a
}

fn evaluate_args(run: &Path, extra: &[&str]) -> EvaluateArgs {
    let mut args = vec!["evaluate", "--run", run.to_str().unwrap(), "--panels", "1"];
    args.extend_from_slice(extra);
    let Command::Evaluate(a) = parse(&args) else { unreachable!() };
    a
}

struct Workspace {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    runs: PathBuf,
}

fn workspace(n: usize) -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    prepare(&data, n);
    Workspace { _tmp: tmp, data, runs }
}

#[test]
fn prepare_writes_three_splits_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    let counts = prepare(&root, 16);
    assert_eq!(counts, vec![(SplitRole::Train, 12), (SplitRole::Val, 2), (SplitRole::Test, 2)]);
    for dir in ["train/images", "train/masks", "val/images", "test/images"] {
        assert!(root.join(dir).is_dir(), "{dir}");
    }
    let Command::Prepare(again) = parse(&["prepare", "--out", root.to_str().unwrap(), "--phantom", "8"]) else {
        unreachable!()
    };
    assert!(matches!(cmd_prepare(&again), Err(Error::Config(_))));
    let copy = tmp.path().join("copy");
    let Command::Prepare(from) = parse(&["prepare", "--out", copy.to_str().unwrap(), "--source", root.to_str().unwrap()]) else {
        unreachable!()
    };
    assert_eq!(cmd_prepare(&from).unwrap(), counts);
    assert!(Cli::try_parse_from(["reconglgan", "prepare", "--out", "x", "--phantom", "4", "--source", "y"]).is_err());
}

#[test]
fn train_then_evaluate_writes_the_run_layout() {
    let ws = workspace(16);
    let run = cmd_train(&train_args(&ws.data, &ws.runs, &[])).unwrap();
    assert_eq!(run.file_name().unwrap(), "recon-glgan-4x-seed0");
    for f in ["config.json", "history.csv", "timing.csv", "checkpoints/generator_best.ckpt", "checkpoints/generator_last.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let reports = cmd_evaluate(&evaluate_args(&run, &[])).unwrap();
    for f in ["metrics_test_4x.csv", "zero_filled_test_4x.csv", "metrics_test_4x.json"] {
        assert!(reports.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_dir(reports.join("panels_metrics_test_4x")).unwrap().count(), 1);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(reports.join("metrics_test_4x.json")).unwrap()).unwrap();
    assert!(json["reconstruction"]["ROI"]["ssim"]["mean"].is_number(), "{json}");

    let reports = cmd_evaluate(&evaluate_args(&run, &["--identity", "--acc", "8"])).unwrap();
    assert_eq!(
        fs::read_to_string(reports.join("identity_test_8x.csv")).unwrap(),
        fs::read_to_string(reports.join("zero_filled_test_8x.csv")).unwrap()
    );

    // Same config and seed: byte-identical history and metrics.
    let history = fs::read(run.join("history.csv")).unwrap();
    let metrics = fs::read(run.join("reports/metrics_test_4x.csv")).unwrap();
    assert!(matches!(cmd_train(&train_args(&ws.data, &ws.runs, &[])), Err(Error::Config(_))));
    let rerun = cmd_train(&train_args(&ws.data, &ws.runs, &["--force"])).unwrap();
    assert_eq!(fs::read(rerun.join("history.csv")).unwrap(), history);
    cmd_evaluate(&evaluate_args(&rerun, &[])).unwrap();
    assert_eq!(fs::read(rerun.join("reports/metrics_test_4x.csv")).unwrap(), metrics);
}

#[test]
fn config_echo_records_the_resolved_loss_terms() {
    let ws = workspace(8);
    let run = cmd_train(&train_args(&ws.data, &ws.runs, &["--variant", "gl-segan", "--run-id", "echo"])).unwrap();
    let cfg = RunConfig::load(&run.join("config.json")).unwrap();
    let spec = cfg.loss_spec.clone().unwrap();
    let names: Vec<&str> = spec.terms.iter().map(|t| t.name()).collect();
    assert_eq!(names, ["L_imag", "L_context", "L_ssim"]);
    assert_eq!(cfg.train.generator.base_channels, 4);
    // The echoed file is itself a valid config.
    let Command::Train(a) = parse(&[
        "train",
        "--config",
        run.join("config.json").to_str().unwrap(),
        "--out",
        ws.runs.to_str().unwrap(),
        "--run-id",
        "from-echo",
    ]) else {
        unreachable!()
    };
    let again = cmd_train(&a).unwrap();
    assert_eq!(fs::read(again.join("history.csv")).unwrap(), fs::read(run.join("history.csv")).unwrap());
}

#[test]
fn bad_configs_are_rejected() {
    let ws = workspace(8);
    let path = ws.runs.join("bad.json");
    fs::create_dir_all(&ws.runs).unwrap();
    for text in [r#"{"train": {"epochz": 1}}"#, r#"{"colour": "blue"}"#] {
        fs::write(&path, text).unwrap();
        let Command::Train(a) = parse(&["train", "--config", path.to_str().unwrap(), "--data", ws.data.to_str().unwrap()]) else {
            unreachable!()
        };
        assert!(matches!(cmd_train(&a), Err(Error::Config(_))), "{text}");
    }
    // A stale loss_spec that disagrees with the variant.
    let mut cfg = RunConfig {
        data: Some(ws.data.clone()),
        ..RunConfig::default()
    };
    cfg.loss_spec = Some(recon_glgan::losses::LossSpec::from(recon_glgan::losses::Variant::Gan));
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.loss_spec = Some(cfg.train.loss_spec());
    cfg.validate().unwrap();

    for flags in [&["--variant", "GL-GAN"][..], &["--acc", "3"], &["--roi-mode", "nearby"]] {
        assert!(matches!(cmd_train(&train_args(&ws.data, &ws.runs, flags)), Err(Error::Config(_))), "{flags:?}");
    }
    let Command::Train(no_data) = parse(&["train", "--out", ws.runs.to_str().unwrap()]) else { unreachable!() };
    assert!(matches!(cmd_train(&no_data), Err(Error::Config(_))));
}

#[test]
fn missing_checkpoint_exits_nonzero() {
    let ws = workspace(8);
    let run = ws.runs.join("nothing");
    fs::create_dir_all(&run).unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_reconglgan"))
        .args(["evaluate", "--run", run.to_str().unwrap(), "--data", ws.data.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing checkpoint"), "{stderr}");
    let help = Process::new(env!("CARGO_BIN_EXE_reconglgan")).arg("--help").output().unwrap();
    assert!(help.status.success());
    for sub in ["prepare", "train", "evaluate", "segeval"] {
        assert!(String::from_utf8_lossy(&help.stdout).contains(sub));
    }
}

#[test]
fn segmentation_run_and_segeval() {
    let ws = workspace(16);
    let recon = cmd_train(&train_args(&ws.data, &ws.runs, &["--run-id", "recon"])).unwrap();
    let seg = cmd_train(&train_args(&ws.data, &ws.runs, &["--task", "segmentation", "--run-id", "seg"])).unwrap();
    assert!(seg.join("checkpoints/segnet.ckpt").is_file());
    let recon_spec = format!("glgan={}", recon.display());
    let Command::Segeval(a) = parse(&["segeval", "--run", seg.to_str().unwrap(), "--recon", &recon_spec, "--panels", "1"]) else {
        unreachable!()
    };
    let reports = cmd_segeval(&a).unwrap();
    let mut r = csv::Reader::from_path(reports.join("segeval_test_4x.csv")).unwrap();
    let rows: Vec<SegEvalRow> = r.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), 2 * 3 * 3);
    for row in rows.iter().filter(|r| r.source == "FS") {
        assert_eq!(row.dice, 1.0);
        assert!(row.hd.is_none() || row.hd == Some(0.0));
    }
    assert!(rows.iter().any(|r| r.source == "glgan"));
    assert!(reports.join("segeval_summary_test_4x.csv").is_file());
    assert_eq!(fs::read_dir(reports.join("overlays_test_4x")).unwrap().count(), 1);

    let reserved = format!("FS={}", recon.display());
    let Command::Segeval(bad) = parse(&["segeval", "--run", seg.to_str().unwrap(), "--recon", &reserved]) else {
        unreachable!()
    };
    assert!(matches!(cmd_segeval(&bad), Err(Error::Config(_))));
    let Command::Segeval(missing) = parse(&["segeval", "--run", recon.to_str().unwrap(), "--recon", &recon_spec]) else {
        unreachable!()
    };
    assert!(matches!(cmd_segeval(&missing), Err(Error::Checkpoint(_))));
}

#[test]
fn documented_config_parses() {
    let text = r#"{
      "task": "reconstruction",
      "data": "data",
      "train": {
        "variant": "Recon-GLGAN",
        "acceleration": 4,
        "epochs": 150,
        "batch_size": 8,
        "seed": 0,
        "roi_mode": "oracle",
        "generator": { "depth": 4, "base_channels": 64, "head": "residual", "norm": "instance" },
        "g_optimizer": { "kind": "adam", "lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8 },
        "d_optimizer": { "kind": "sgd", "lr": 0.005 },
        "weights": { "lambda_imag": 1.0, "lambda_context": 0.0004 }
      }
    }"#;
    let cfg: RunConfig = serde_json::from_str(text).unwrap();
    let defaults = RunConfig {
        data: Some(PathBuf::from("data")),
        ..RunConfig::default()
    };
    assert_eq!(cfg, defaults);
}
