//! Runner-level contracts: artifact layout, snapshot reproducibility,
//! collapse classification of untrained models, grid structure, and the CLI
//! binary surface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use echozoo::eval::export::RunReport;
use echozoo::eval::PerformanceClass;
use echozoo::models::{Conv2Kernel, Family, ModelConfig, NormMode};
use echozoo_cli::config::{DatasetSpec, GridSpec, RunConfig, TrainOverrides};
use echozoo_cli::runner::{emit_plot_data, evaluate_model, run_experiment, run_grid};

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("echozoo_runner_{}_{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_run_config(seed: u64) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            width_multiplier: 0.25,
            height: 16,
            width: 16,
            ..ModelConfig::new(Family::I3dMini)
        },
        train: TrainOverrides {
            max_epochs: Some(2),
            patience: Some(2),
            batch_size: Some(2),
            seed: Some(seed),
            ..Default::default()
        },
        dataset: DatasetSpec {
            n_clips: 10,
            split_ratios: [0.6, 0.2, 0.2],
            seed,
            ..Default::default()
        },
    }
}

#[test]
fn run_artifacts_contract_and_snapshot_reproducibility() {
    let dir = temp_dir("artifacts");
    let config = tiny_run_config(5);
    let artifacts = run_experiment(&config, &dir).unwrap();
    for f in [
        "config.json",
        "model.json",
        "model.bin",
        "history.csv",
        "metrics.json",
        "pred_vs_truth.csv",
        "bland_altman.csv",
        "learning_curve.csv",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    assert_eq!(artifacts.report.status, "completed");

    // Re-running from the written snapshot reproduces metrics.json bitwise.
    let snapshot: RunConfig =
        serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    let dir2 = temp_dir("artifacts_rerun");
    run_experiment(&snapshot, &dir2).unwrap();
    assert_eq!(
        fs::read(dir.join("metrics.json")).unwrap(),
        fs::read(dir2.join("metrics.json")).unwrap()
    );
    // Prediction CSV rows equal the test-set size (+1 header).
    let rows = fs::read_to_string(dir.join("pred_vs_truth.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 2 + 1);
    let _ = fs::remove_dir_all(&dir);
    let _ = fs::remove_dir_all(&dir2);
}

#[test]
fn untrained_model_is_classified_collapsed() {
    let dir = temp_dir("collapsed");
    let mut config = tiny_run_config(6);
    config.train.initial_lr = Some(1e-12);
    let artifacts = run_experiment(&config, &dir).unwrap();
    assert_eq!(artifacts.report.class, Some(PerformanceClass::Collapsed));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn emit_plots_is_idempotent() {
    let dir = temp_dir("plots");
    run_experiment(&tiny_run_config(7), &dir).unwrap();
    let before: Vec<Vec<u8>> = ["pred_vs_truth.csv", "bland_altman.csv", "learning_curve.csv"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect();
    emit_plot_data(&dir).unwrap();
    let after: Vec<Vec<u8>> = ["pred_vs_truth.csv", "bland_altman.csv", "learning_curve.csv"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect();
    assert_eq!(before, after);
    // Learning-curve schema.
    let lc = fs::read_to_string(dir.join("learning_curve.csv")).unwrap();
    assert_eq!(
        lc.lines().next().unwrap(),
        "epoch,lr,train_loss,train_rmse,val_loss,val_rmse"
    );
    assert!(emit_plot_data(Path::new("/nonexistent-run")).is_err());
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn evaluate_reloads_serialized_models() {
    let run_dir = temp_dir("eval_run");
    let config = tiny_run_config(8);
    run_experiment(&config, &run_dir).unwrap();

    // Records matching the model dims.
    let clips = echozoo::data::generate_labeled_clips(
        6,
        (20.0, 70.0),
        &echozoo::data::SyntheticParams {
            height: 16,
            width: 16,
            ..Default::default()
        },
        99,
    )
    .unwrap();
    let records = run_dir.join("clips.bin");
    echozoo::data::write_records(&clips, &records).unwrap();

    let eval_dir = temp_dir("eval_out");
    let report = evaluate_model(
        &run_dir.join("model.json"),
        &run_dir.join("model.bin"),
        &records,
        &eval_dir,
    )
    .unwrap();
    assert!(report.test.is_some());
    assert!(eval_dir.join("metrics.json").exists());
    let _ = fs::remove_dir_all(&run_dir);
    let _ = fs::remove_dir_all(&eval_dir);
}

fn micro_grid_spec(families: Vec<Family>, kernels: Vec<Conv2Kernel>) -> GridSpec {
    GridSpec {
        families,
        norms: vec![NormMode::Batch, NormMode::Layer],
        conv2_kernels: kernels,
        width_multiplier: 0.25,
        frames: 28,
        height: 16,
        width: 16,
        train: TrainOverrides {
            max_epochs: Some(1),
            patience: Some(1),
            batch_size: Some(2),
            seed: Some(3),
            ..Default::default()
        },
        dataset: DatasetSpec {
            n_clips: 8,
            split_ratios: [0.5, 0.25, 0.25],
            seed: 3,
            ..Default::default()
        },
    }
}

#[test]
fn micro_grid_completes_all_cells() {
    let dir = temp_dir("grid4");
    let spec = micro_grid_spec(
        vec![Family::I3dMini, Family::TwoStream],
        vec![Conv2Kernel::K1x1x1],
    );
    let summary_path = run_grid(&spec, &dir).unwrap();
    let summary = fs::read_to_string(&summary_path).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "row,I3D_MINI,TWO_STREAM");
    assert_eq!(lines.len(), 3); // header + 2 norm rows
    // All four cells completed with numeric RMSE values.
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 3);
        for value in &cells[1..] {
            assert!(value.parse::<f64>().is_ok(), "cell {value} not numeric");
        }
    }
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn grid_marks_conv2_rows_inapplicable_for_two_stream() {
    let dir = temp_dir("grid_dash");
    let spec = micro_grid_spec(
        vec![Family::TwoStream],
        vec![Conv2Kernel::K1x1x1, Conv2Kernel::K3x3x3],
    );
    let summary = fs::read_to_string(run_grid(&spec, &dir).unwrap()).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    // Four rows: BatchNorm, LayerNorm, 3x3x3+BatchNorm, 3x3x3+LayerNorm.
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("3x3x3 Conv2 + BatchNorm,"));
    assert_eq!(lines[3].split(',').nth(1), Some("-"));
    assert_eq!(lines[4].split(',').nth(1), Some("-"));
    // Norm-only rows trained.
    assert!(lines[1].split(',').nth(1).unwrap().parse::<f64>().is_ok());
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn grid_summary_cells_equal_per_run_metrics() {
    let dir = temp_dir("grid_match");
    let spec = micro_grid_spec(vec![Family::I3dMini], vec![Conv2Kernel::K1x1x1]);
    let summary = fs::read_to_string(run_grid(&spec, &dir).unwrap()).unwrap();
    let line = summary.lines().nth(1).unwrap();
    let cell_value = line.split(',').nth(1).unwrap();
    let metrics: RunReport = serde_json::from_str(
        &fs::read_to_string(dir.join("cells/I3D_MINI__BatchNorm/metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(cell_value, format!("{}", metrics.test.unwrap().rmse));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn cli_binary_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_echozoo");
    let dir = temp_dir("cli");

    // generate-data
    let gen_cfg = dir.join("gen.json");
    fs::write(
        &gen_cfg,
        r#"{"n_clips": 6, "frames": 28, "height": 16, "width": 16, "seed": 4}"#,
    )
    .unwrap();
    let records = dir.join("clips.bin");
    let out = Command::new(bin)
        .args(["generate-data", "--config"])
        .arg(&gen_cfg)
        .arg("--out")
        .arg(&records)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(records.exists());

    // train
    let run_cfg = dir.join("run.json");
    fs::write(
        &run_cfg,
        r#"{
            "model": {"family": "I3D_MINI", "width_multiplier": 0.25, "height": 16, "width": 16},
            "train": {"max_epochs": 1, "patience": 1, "batch_size": 2, "seed": 4},
            "dataset": {"n_clips": 8, "split_ratios": [0.5, 0.25, 0.25], "seed": 4}
        }"#,
    )
    .unwrap();
    let run_dir = dir.join("run");
    let out = Command::new(bin)
        .args(["train", "--config"])
        .arg(&run_cfg)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("metrics.json").exists());

    // evaluate on the generated records
    let eval_dir = dir.join("eval");
    let out = Command::new(bin)
        .args(["evaluate", "--model"])
        .arg(&run_dir)
        .arg("--records")
        .arg(&records)
        .arg("--out")
        .arg(&eval_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // emit-plots
    let out = Command::new(bin)
        .args(["emit-plots", "--run"])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Failure path: machine-readable JSON on stderr, nonzero exit.
    let out = Command::new(bin)
        .args(["train", "--config", "/nonexistent.json", "--out"])
        .arg(dir.join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert!(parsed.get("error").is_some());
    let _ = fs::remove_dir_all(&dir);
}
