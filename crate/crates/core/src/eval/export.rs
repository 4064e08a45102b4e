//! Report files: metrics JSON plus the three plot-data CSVs
//! (prediction-vs-truth, Bland-Altman, learning curve).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlandAltman, GeneralizationGap, MetricsReport, PerformanceClass};
use crate::error::{Error, Result};
use crate::train::History;

/// Everything a finished run reports, serialized as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: String,
    pub train: Option<MetricsReport>,
    pub val: Option<MetricsReport>,
    pub test: Option<MetricsReport>,
    pub bland_altman_test: Option<BlandAltman>,
    pub generalization: Option<GeneralizationGap>,
    pub class: Option<PerformanceClass>,
    pub prediction_spread: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub param_count: usize,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(format!("report encode: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Io(format!("report decode: {e}")))
    }
}

/// truth,pred rows for the scatter plot.
pub fn pred_vs_truth_csv(preds: &[f64], truths: &[f64]) -> String {
    let mut out = String::from("truth,pred\n");
    for (&p, &t) in preds.iter().zip(truths) {
        out.push_str(&format!("{t},{p}\n"));
    }
    out
}

/// mean,diff rows ((p+t)/2 against p-t) for the agreement plot.
pub fn bland_altman_csv(preds: &[f64], truths: &[f64]) -> String {
    let mut out = String::from("mean,diff\n");
    for (&p, &t) in preds.iter().zip(truths) {
        out.push_str(&format!("{},{}\n", (p + t) / 2.0, p - t));
    }
    out
}

/// Write metrics.json, pred_vs_truth.csv, bland_altman.csv and
/// learning_curve.csv into `dir`.
pub fn export_report(
    report: &RunReport,
    history: &History,
    test_preds: &[f64],
    test_truths: &[f64],
    dir: &Path,
) -> Result<()> {
    if test_preds.is_empty() || test_preds.len() != test_truths.len() {
        return Err(Error::EmptyInput("export predictions"));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), report.to_json()?)?;
    fs::write(dir.join("pred_vs_truth.csv"), pred_vs_truth_csv(test_preds, test_truths))?;
    fs::write(dir.join("bland_altman.csv"), bland_altman_csv(test_preds, test_truths))?;
    fs::write(dir.join("learning_curve.csv"), history.csv_string())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::regression_metrics;
    use crate::train::EpochRecord;

    fn sample_report() -> RunReport {
        let truths = [40.0, 50.0, 60.0];
        let preds = [42.0, 47.0, 63.0];
        let m = regression_metrics(&preds, &truths).unwrap();
        RunReport {
            status: "completed".to_string(),
            train: Some(m.clone()),
            val: Some(m.clone()),
            test: Some(m),
            bland_altman_test: Some(crate::eval::bland_altman(&preds, &truths).unwrap()),
            generalization: Some(crate::eval::generalization_gap(3.0, 3.5)),
            class: Some(PerformanceClass::WellPerforming),
            prediction_spread: Some(crate::eval::prediction_spread(&preds)),
            best_epoch: 4,
            epochs_run: 9,
            param_count: 1234,
        }
    }

    #[test]
    fn report_json_round_trips_numerically() {
        let report = sample_report();
        let json = report.to_json().unwrap();
        let back = RunReport::from_json(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn csv_columns_match_definitional_oracles() {
        let truths = [40.0, 50.0];
        let preds = [44.0, 47.0];
        let pv = pred_vs_truth_csv(&preds, &truths);
        let mut lines = pv.lines();
        assert_eq!(lines.next().unwrap(), "truth,pred");
        assert_eq!(lines.next().unwrap(), "40,44");
        assert_eq!(pv.lines().count(), 3);

        let ba = bland_altman_csv(&preds, &truths);
        let mut lines = ba.lines();
        assert_eq!(lines.next().unwrap(), "mean,diff");
        // (44+40)/2 = 42, 44-40 = 4.
        assert_eq!(lines.next().unwrap(), "42,4");
        assert_eq!(lines.next().unwrap(), "48.5,-3");
    }

    #[test]
    fn export_writes_all_artifacts_idempotently() {
        let dir = std::env::temp_dir().join(format!("echozoo_export_{}", std::process::id()));
        let history = History {
            epochs: vec![EpochRecord {
                epoch: 0,
                lr: 1e-3,
                train_loss: 1.0,
                train_rmse: 1.0,
                val_loss: 2.0,
                val_rmse: 1.4,
            }],
            best_epoch: 0,
        };
        let report = sample_report();
        let preds = [42.0, 47.0, 63.0];
        let truths = [40.0, 50.0, 60.0];
        export_report(&report, &history, &preds, &truths, &dir).unwrap();
        for f in ["metrics.json", "pred_vs_truth.csv", "bland_altman.csv", "learning_curve.csv"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        let first = fs::read(dir.join("metrics.json")).unwrap();
        export_report(&report, &history, &preds, &truths, &dir).unwrap();
        assert_eq!(fs::read(dir.join("metrics.json")).unwrap(), first);
        // Re-parsed report is numerically identical.
        let back = RunReport::from_json(&String::from_utf8(first).unwrap()).unwrap();
        assert_eq!(back, report);
        fs::remove_dir_all(&dir).ok();
    }
}
