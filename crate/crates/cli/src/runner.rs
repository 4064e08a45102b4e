//! Experiment execution: one run per config with self-describing artifacts,
//! the normalization/kernel grid with its summary table, model reload
//! evaluation, and idempotent plot-data emission.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use echozoo::data::{generate_labeled_clips, read_records, split_dataset, SyntheticParams, VideoClip};
use echozoo::eval::export::{export_report, RunReport};
use echozoo::eval::{
    bland_altman, classify_performance, generalization_gap, prediction_spread, regression_metrics,
    MetricsReport,
};
use echozoo::models::{build_model, load_model, save_model, Conv2Kernel, Family, Model, ModelConfig, NormMode};
use echozoo::rng::{Prng, Stream};
use echozoo::train::{fit, predict_all, prepare_samples, History, TrainSample, TrainStatus};

use crate::config::{GridSpec, RunConfig, TrainOverrides};

/// Paths of everything one run leaves on disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: RunReport,
    pub history: History,
}

struct PreparedData {
    train: Vec<TrainSample>,
    val: Vec<TrainSample>,
    test: Vec<TrainSample>,
}

fn load_dataset(config: &RunConfig) -> Result<PreparedData> {
    let ds = &config.dataset;
    let clips: Vec<VideoClip> = match &ds.records_path {
        Some(path) => read_records(path).context("loading clip records")?,
        None => generate_labeled_clips(
            ds.n_clips,
            (ds.ef_range[0], ds.ef_range[1]),
            &SyntheticParams {
                base_radius: ds.base_radius,
                cycle_period: ds.cycle_period,
                noise_std: ds.noise_std,
                center_jitter: ds.center_jitter,
                frames: config.model.frames,
                height: config.model.height,
                width: config.model.width,
                ..Default::default()
            },
            ds.seed,
        )?,
    };
    let expected = [config.model.frames, config.model.height, config.model.width, 1];
    for clip in &clips {
        if clip.shape() != expected {
            bail!(
                "clip shape {:?} does not match model dims {:?}",
                clip.shape(),
                expected
            );
        }
    }
    let split = split_dataset(clips.len(), ds.split_ratios, ds.seed)?;
    let pick = |idx: &[usize]| -> Vec<VideoClip> { idx.iter().map(|&i| clips[i].clone()).collect() };
    Ok(PreparedData {
        train: prepare_samples(&pick(&split.train), config.model.family)?,
        val: prepare_samples(&pick(&split.val), config.model.family)?,
        test: prepare_samples(&pick(&split.test), config.model.family)?,
    })
}

fn metrics_for(
    model: &mut Model,
    samples: &[TrainSample],
    batch: usize,
) -> Result<(MetricsReport, Vec<f64>, Vec<f64>)> {
    let preds = predict_all(model, samples, batch)?;
    let truths: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let report = regression_metrics(&preds, &truths)?;
    Ok((report, preds, truths))
}

/// Execute one experiment and write its artifact directory: resolved config
/// snapshot, serialized model, training history, metrics, and plot CSVs.
/// A diverged run still writes its artifacts with status "diverged".
pub fn run_experiment(config: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    config.model.validate()?;
    let resolved = config.train.resolve(config.model.family, config.model.cell());
    resolved.validate()?;
    let snapshot = RunConfig {
        model: config.model.clone(),
        train: TrainOverrides::from_resolved(&resolved),
        dataset: config.dataset.clone(),
    };

    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(&snapshot)?,
    )?;

    let data = load_dataset(config)?;
    let mut rng = Prng::new(resolved.seed, Stream::Init);
    let mut model = build_model(&config.model, &mut rng)?;
    let fit_result = fit(&mut model, &data.train, &data.val, &resolved)?;

    save_model(&model, &out_dir.join("model.json"), &out_dir.join("model.bin"))?;
    fit_result.history.to_csv(&out_dir.join("history.csv"))?;

    let report;
    let mut test_preds = Vec::new();
    let mut test_truths = Vec::new();
    match &fit_result.status {
        TrainStatus::Completed => {
            let (train_m, _, _) = metrics_for(&mut model, &data.train, resolved.batch_size)?;
            let (val_m, _, _) = metrics_for(&mut model, &data.val, resolved.batch_size)?;
            let (test_m, preds, truths) = metrics_for(&mut model, &data.test, resolved.batch_size)?;
            let spread = prediction_spread(&preds);
            let gap = generalization_gap(train_m.rmse, test_m.rmse);
            let class = classify_performance(&test_m, spread);
            report = RunReport {
                status: "completed".to_string(),
                train: Some(train_m),
                val: Some(val_m),
                test: Some(test_m),
                bland_altman_test: Some(bland_altman(&preds, &truths)?),
                generalization: Some(gap),
                class: Some(class),
                prediction_spread: Some(spread),
                best_epoch: fit_result.history.best_epoch,
                epochs_run: fit_result.history.epochs.len(),
                param_count: model.count_params(),
            };
            test_preds = preds;
            test_truths = truths;
        }
        TrainStatus::Diverged(location) => {
            report = RunReport {
                status: format!("diverged: {location}"),
                train: None,
                val: None,
                test: None,
                bland_altman_test: None,
                generalization: None,
                class: None,
                prediction_spread: None,
                best_epoch: fit_result.history.best_epoch,
                epochs_run: fit_result.history.epochs.len(),
                param_count: model.count_params(),
            };
        }
    }

    if test_preds.is_empty() {
        // Diverged: persist the report alone; there are no predictions.
        fs::write(out_dir.join("metrics.json"), report.to_json()?)?;
    } else {
        export_report(&report, &fit_result.history, &test_preds, &test_truths, out_dir)?;
    }
    Ok(RunArtifacts {
        dir: out_dir.to_path_buf(),
        report,
        history: fit_result.history,
    })
}

/// Reload a serialized model and evaluate it against a clip-record file.
pub fn evaluate_model(model_json: &Path, model_bin: &Path, records: &Path, out_dir: &Path) -> Result<RunReport> {
    let mut model = load_model(model_json, model_bin)?;
    let clips = read_records(records)?;
    let samples = prepare_samples(&clips, model.config.family)?;
    let batch = 4;
    let (metrics, preds, truths) = metrics_for(&mut model, &samples, batch)?;
    let spread = prediction_spread(&preds);
    let report = RunReport {
        status: "evaluated".to_string(),
        train: None,
        val: None,
        test: Some(metrics.clone()),
        bland_altman_test: Some(bland_altman(&preds, &truths)?),
        generalization: None,
        class: Some(classify_performance(&metrics, spread)),
        prediction_spread: Some(spread),
        best_epoch: 0,
        epochs_run: 0,
        param_count: model.count_params(),
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics.json"), report.to_json()?)?;
    fs::write(
        out_dir.join("pred_vs_truth.csv"),
        echozoo::eval::export::pred_vs_truth_csv(&preds, &truths),
    )?;
    fs::write(
        out_dir.join("bland_altman.csv"),
        echozoo::eval::export::bland_altman_csv(&preds, &truths),
    )?;
    Ok(report)
}

/// Regenerate the three plot-data CSVs from a completed run directory.
/// Re-emission is bit-identical.
pub fn emit_plot_data(run_dir: &Path) -> Result<()> {
    let pred_path = run_dir.join("pred_vs_truth.csv");
    let history_path = run_dir.join("history.csv");
    if !pred_path.exists() || !history_path.exists() {
        bail!(
            "run directory {} is missing pred_vs_truth.csv or history.csv",
            run_dir.display()
        );
    }
    let text = fs::read_to_string(&pred_path)?;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "truth,pred" {
                bail!("unexpected pred_vs_truth header: {line}");
            }
            continue;
        }
        let (t, p) = line
            .split_once(',')
            .with_context(|| format!("malformed row {i} in pred_vs_truth.csv"))?;
        truths.push(t.parse::<f64>()?);
        preds.push(p.parse::<f64>()?);
    }
    fs::write(&pred_path, echozoo::eval::export::pred_vs_truth_csv(&preds, &truths))?;
    fs::write(
        run_dir.join("bland_altman.csv"),
        echozoo::eval::export::bland_altman_csv(&preds, &truths),
    )?;
    fs::copy(&history_path, run_dir.join("learning_curve.csv"))?;
    Ok(())
}

/// One grid row: a normalization mode plus an optional conv2 kernel swap.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub label: String,
    pub norm: NormMode,
    pub conv2_kernel: Conv2Kernel,
}

pub fn grid_rows(spec: &GridSpec) -> Vec<GridRow> {
    let mut rows = Vec::new();
    for &kernel in &spec.conv2_kernels {
        for &norm in &spec.norms {
            let norm_label = match norm {
                NormMode::Batch => "BatchNorm",
                NormMode::Layer => "LayerNorm",
                NormMode::Mixed => "MixedNorm",
            };
            let label = if kernel == Conv2Kernel::K1x1x1 {
                norm_label.to_string()
            } else {
                format!("{} Conv2 + {}", kernel.label(), norm_label)
            };
            rows.push(GridRow {
                label,
                norm,
                conv2_kernel: kernel,
            });
        }
    }
    rows
}

fn cell_dir_name(family: Family, row: &GridRow) -> String {
    let sanitized: String = row
        .label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{}__{}", family.label(), sanitized)
}

/// A cell is skipped ("-") when the row varies conv2 for a family without an
/// I3D stem, or pairs mixed norm with a non-recurrent family.
pub fn cell_applicable(family: Family, row: &GridRow) -> bool {
    if row.conv2_kernel != Conv2Kernel::K1x1x1 && !family.has_i3d_stem() {
        return false;
    }
    if row.norm == NormMode::Mixed && family != Family::CnnRnnScratch {
        return false;
    }
    true
}

/// Run every applicable grid cell and write a summary CSV shaped like the
/// benchmark table: rows = normalization/kernel combos, columns = families,
/// cells = test RMSE (or "-" where inapplicable). Individual cell failures
/// are recorded in place and the grid continues.
pub fn run_grid(spec: &GridSpec, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("grid.json"), serde_json::to_string_pretty(spec)?)?;
    let rows = grid_rows(spec);
    let mut summary = String::from("row");
    for family in &spec.families {
        summary.push(',');
        summary.push_str(family.label());
    }
    summary.push('\n');

    for row in &rows {
        summary.push_str(&row.label);
        for &family in &spec.families {
            summary.push(',');
            if !cell_applicable(family, row) {
                summary.push('-');
                continue;
            }
            let config = RunConfig {
                model: ModelConfig {
                    family,
                    norm: row.norm,
                    conv2_kernel: row.conv2_kernel,
                    width_multiplier: spec.width_multiplier,
                    frames: spec.frames,
                    height: spec.height,
                    width: spec.width,
                    ..ModelConfig::new(family)
                },
                train: spec.train.clone(),
                dataset: spec.dataset.clone(),
            };
            let cell_dir = out_dir.join("cells").join(cell_dir_name(family, row));
            match run_experiment(&config, &cell_dir) {
                Ok(artifacts) => match &artifacts.report.test {
                    Some(test) => summary.push_str(&format!("{}", test.rmse)),
                    None => summary.push_str("diverged"),
                },
                Err(e) => {
                    fs::create_dir_all(&cell_dir)?;
                    fs::write(cell_dir.join("error.txt"), format!("{e:#}"))?;
                    summary.push_str("error");
                }
            }
        }
        summary.push('\n');
    }
    let summary_path = out_dir.join("summary.csv");
    fs::write(&summary_path, summary)?;
    Ok(summary_path)
}
