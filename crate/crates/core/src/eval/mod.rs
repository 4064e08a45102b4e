//! Regression metrics, Bland-Altman agreement analysis, generalization-gap
//! accounting, and mean-predictor collapse classification.

pub mod export;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RMSE/MAE/R2 plus the clinically interesting 40-50% band MAE (absent when
/// no ground-truth values fall in the band).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_mae_40_50: Option<f64>,
}

fn check_paired(preds: &[f64], truths: &[f64]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            left: vec![preds.len()],
            right: vec![truths.len()],
            context: "metric vectors",
        });
    }
    if preds.len() < 2 {
        return Err(Error::EmptyInput("metrics need at least 2 samples"));
    }
    Ok(())
}

/// rmse = sqrt(mean((p-t)^2)); mae = mean|p-t|;
/// r2 = 1 - sum((p-t)^2) / sum((t - mean t)^2).
pub fn regression_metrics(preds: &[f64], truths: &[f64]) -> Result<MetricsReport> {
    check_paired(preds, truths)?;
    let n = preds.len();
    let mut sse = 0.0;
    let mut abs = 0.0;
    for (&p, &t) in preds.iter().zip(truths) {
        sse += (p - t) * (p - t);
        abs += (p - t).abs();
    }
    let mean_truth = truths.iter().sum::<f64>() / n as f64;
    let sst: f64 = truths.iter().map(|&t| (t - mean_truth) * (t - mean_truth)).sum();
    if sst == 0.0 {
        return Err(Error::InvalidConfig(
            "R^2 undefined: ground-truth variance is zero".to_string(),
        ));
    }
    let band: Vec<f64> = preds
        .iter()
        .zip(truths)
        .filter(|(_, &t)| (40.0..=50.0).contains(&t))
        .map(|(&p, &t)| (p - t).abs())
        .collect();
    Ok(MetricsReport {
        rmse: (sse / n as f64).sqrt(),
        mae: abs / n as f64,
        r2: 1.0 - sse / sst,
        n,
        band_mae_40_50: if band.is_empty() {
            None
        } else {
            Some(band.iter().sum::<f64>() / band.len() as f64)
        },
    })
}

/// Bias and 95% limits of agreement (bias +- 1.96 * sample sd of p - t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

pub fn bland_altman(preds: &[f64], truths: &[f64]) -> Result<BlandAltman> {
    check_paired(preds, truths)?;
    let n = preds.len();
    let diffs: Vec<f64> = preds.iter().zip(truths).map(|(&p, &t)| p - t).collect();
    let bias = diffs.iter().sum::<f64>() / n as f64;
    let ss: f64 = diffs.iter().map(|&d| (d - bias) * (d - bias)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    Ok(BlandAltman {
        bias,
        sd,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
    })
}

/// Test-minus-train RMSE divergence; flagged as overfitting above the
/// threshold (default 3.0 EF points).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationGap {
    pub gap: f64,
    pub overfit: bool,
    pub threshold: f64,
}

pub const DEFAULT_OVERFIT_THRESHOLD: f64 = 3.0;

pub fn generalization_gap(train_rmse: f64, test_rmse: f64) -> GeneralizationGap {
    generalization_gap_with(train_rmse, test_rmse, DEFAULT_OVERFIT_THRESHOLD)
}

pub fn generalization_gap_with(train_rmse: f64, test_rmse: f64, threshold: f64) -> GeneralizationGap {
    let gap = test_rmse - train_rmse;
    GeneralizationGap {
        gap,
        overfit: gap > threshold,
        threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerformanceClass {
    WellPerforming,
    Ordinary,
    Collapsed,
}

/// Thresholds behind the classification rule: a model is collapsed when R^2
/// falls below `collapse_r2` or the prediction spread is under
/// `collapse_spread` EF points; otherwise well-performing up to
/// `well_performing_rmse` test RMSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierThresholds {
    pub well_performing_rmse: f64,
    pub collapse_r2: f64,
    pub collapse_spread: f64,
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        ClassifierThresholds {
            well_performing_rmse: 8.5,
            collapse_r2: 0.05,
            collapse_spread: 0.5,
        }
    }
}

pub fn classify_performance(report: &MetricsReport, prediction_spread: f64) -> PerformanceClass {
    classify_performance_with(report, prediction_spread, &ClassifierThresholds::default())
}

pub fn classify_performance_with(
    report: &MetricsReport,
    prediction_spread: f64,
    thresholds: &ClassifierThresholds,
) -> PerformanceClass {
    if report.r2 < thresholds.collapse_r2 || prediction_spread < thresholds.collapse_spread {
        PerformanceClass::Collapsed
    } else if report.rmse <= thresholds.well_performing_rmse {
        PerformanceClass::WellPerforming
    } else {
        PerformanceClass::Ordinary
    }
}

/// Sample standard deviation of a prediction vector (the spread fed to the
/// collapse rule).
pub fn prediction_spread(preds: &[f64]) -> f64 {
    if preds.len() < 2 {
        return 0.0;
    }
    let mean = preds.iter().sum::<f64>() / preds.len() as f64;
    let ss: f64 = preds.iter().map(|&p| (p - mean) * (p - mean)).sum();
    (ss / (preds.len() - 1) as f64).sqrt()
}
