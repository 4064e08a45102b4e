//! JSON configuration types. Unknown keys are rejected; omitted training
//! keys resolve to per-family defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use echozoo::layers::RnnCell;
use echozoo::models::{default_dropout, Conv2Kernel, Family, ModelConfig, NormMode};
use echozoo::train::ExperimentConfig;

/// L1/L2 coefficient applied when regularization is switched on without an
/// explicit value.
pub const DEFAULT_L1: f64 = 1e-4;
pub const DEFAULT_L2: f64 = 1e-4;
/// Clip threshold applied when clipping is switched on without a value.
pub const DEFAULT_CLIP_NORM: f64 = 1.0;

/// Optional training-hyperparameter overrides; anything omitted falls back
/// to the per-family defaults. A fully resolved config serializes to the
/// same schema with every field present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOverrides {
    pub initial_lr: Option<f64>,
    pub decay_period: Option<usize>,
    pub decay_factor: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub clip_norm: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
}

impl TrainOverrides {
    /// Fill a complete training config: per-family defaults under explicit
    /// overrides.
    pub fn resolve(&self, family: Family, cell: RnnCell) -> ExperimentConfig {
        let max_epochs = self.max_epochs.unwrap_or(50);
        ExperimentConfig {
            initial_lr: self.initial_lr.unwrap_or(default_lr(family)),
            decay_period: self.decay_period.unwrap_or(10),
            decay_factor: self.decay_factor.unwrap_or(2.0),
            max_epochs,
            // The default patience shrinks with a shortened run; an explicit
            // value passes through and is validated downstream.
            patience: self.patience.unwrap_or_else(|| 20.min(max_epochs)),
            batch_size: self.batch_size.unwrap_or(default_batch_size(family, cell)),
            dropout_rate: self.dropout_rate.unwrap_or(default_dropout(family)),
            clip_norm: self.clip_norm,
            l1: self.l1.unwrap_or(0.0),
            l2: self.l2.unwrap_or(0.0),
            weight_decay: self.weight_decay.unwrap_or(0.0),
            seed: self.seed.unwrap_or(0),
        }
    }

    /// Overrides with every field pinned, for reproducible snapshots.
    pub fn from_resolved(c: &ExperimentConfig) -> Self {
        TrainOverrides {
            initial_lr: Some(c.initial_lr),
            decay_period: Some(c.decay_period),
            decay_factor: Some(c.decay_factor),
            max_epochs: Some(c.max_epochs),
            patience: Some(c.patience),
            batch_size: Some(c.batch_size),
            dropout_rate: Some(c.dropout_rate),
            clip_norm: c.clip_norm,
            l1: Some(c.l1),
            l2: Some(c.l2),
            weight_decay: Some(c.weight_decay),
            seed: Some(c.seed),
        }
    }
}

/// Initial learning rate by family.
pub fn default_lr(family: Family) -> f64 {
    match family {
        Family::TwoStream => 5e-4,
        Family::FusionSingleInput | Family::FusionDualInput | Family::FusionDualTruncated => 1e-4,
        _ => 1e-3,
    }
}

/// Batch size by family (and recurrent cell for the CNN-RNN).
pub fn default_batch_size(family: Family, cell: RnnCell) -> usize {
    match family {
        Family::TwoStream | Family::FusionCombination | Family::FusionNewCombination => 16,
        Family::CnnRnnScratch => match cell {
            RnnCell::Lstm => 8,
            RnnCell::Gru => 4,
        },
        Family::FusionSingleInput | Family::FusionDualInput | Family::FusionDualTruncated => 4,
        Family::I3dOriginal | Family::I3dMini => 2,
    }
}

/// Synthetic dataset descriptor for a run; clip dimensions come from the
/// model config. `records_path` loads a clip-record file instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_clips: usize,
    pub ef_range: [f64; 2],
    pub noise_std: f64,
    pub center_jitter: f64,
    pub base_radius: f64,
    pub cycle_period: usize,
    pub split_ratios: [f64; 3],
    pub seed: u64,
    pub records_path: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_clips: 64,
            ef_range: [10.0, 80.0],
            noise_std: 0.05,
            center_jitter: 1.0,
            base_radius: 0.55,
            cycle_period: 28,
            split_ratios: [0.70, 0.15, 0.15],
            seed: 0,
            records_path: None,
        }
    }
}

/// One experiment: model, training overrides, dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainOverrides,
    pub dataset: DatasetSpec,
}

/// Standalone clip generation (the `generate-data` subcommand).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub n_clips: usize,
    pub ef_range: [f64; 2],
    pub noise_std: f64,
    pub center_jitter: f64,
    pub base_radius: f64,
    pub cycle_period: usize,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_clips: 64,
            ef_range: [10.0, 80.0],
            noise_std: 0.05,
            center_jitter: 1.0,
            base_radius: 0.55,
            cycle_period: 28,
            seed: 0,
            frames: 28,
            height: 112,
            width: 112,
        }
    }
}

/// The ablation grid: families as columns, normalization (x conv2 kernel)
/// combinations as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub families: Vec<Family>,
    pub norms: Vec<NormMode>,
    pub conv2_kernels: Vec<Conv2Kernel>,
    pub width_multiplier: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub train: TrainOverrides,
    pub dataset: DatasetSpec,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            families: Family::ALL.to_vec(),
            norms: vec![NormMode::Batch, NormMode::Layer],
            conv2_kernels: vec![Conv2Kernel::K1x1x1, Conv2Kernel::K3x3x3],
            width_multiplier: 0.25,
            frames: 28,
            height: 112,
            width: 112,
            train: TrainOverrides::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

fn parse_json_strict<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {what} config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} config {}", path.display()))
}

pub fn parse_run_config(path: &Path) -> Result<RunConfig> {
    let config: RunConfig = parse_json_strict(path, "run")?;
    validate_dataset(&config.dataset)?;
    config.model.validate()?;
    Ok(config)
}

pub fn parse_grid_config(path: &Path) -> Result<GridSpec> {
    let grid: GridSpec = parse_json_strict(path, "grid")?;
    if grid.families.is_empty() || grid.norms.is_empty() || grid.conv2_kernels.is_empty() {
        bail!("grid axes must be non-empty");
    }
    validate_dataset(&grid.dataset)?;
    Ok(grid)
}

pub fn parse_generate_config(path: &Path) -> Result<GenerateConfig> {
    let config: GenerateConfig = parse_json_strict(path, "generate")?;
    if config.n_clips == 0 {
        bail!("n_clips must be positive");
    }
    Ok(config)
}

fn validate_dataset(spec: &DatasetSpec) -> Result<()> {
    if spec.records_path.is_none() && spec.n_clips < 3 {
        bail!("dataset needs at least 3 clips to split, got {}", spec.n_clips);
    }
    if spec.ef_range[0] < 5.0 || spec.ef_range[1] > 90.0 || spec.ef_range[0] >= spec.ef_range[1] {
        bail!("ef_range must satisfy 5 <= lo < hi <= 90, got {:?}", spec.ef_range);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(name: &str, contents: &str) -> PathBuf {
        let path = std::env::temp_dir().join(format!("echozoo_cfg_{}_{name}", std::process::id()));
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn minimal_config_gets_family_defaults() {
        let path = write_temp("min.json", r#"{"model": {"family": "I3D_MINI"}}"#);
        let config = parse_run_config(&path).unwrap();
        let resolved = config.train.resolve(config.model.family, config.model.cell());
        assert_eq!(resolved.initial_lr, 1e-3);
        assert_eq!(resolved.patience, 20);
        assert_eq!(resolved.dropout_rate, 0.5);
        assert_eq!(resolved.batch_size, 2);
        assert_eq!(resolved.max_epochs, 50);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn two_stream_defaults() {
        let path = write_temp("ts.json", r#"{"model": {"family": "TWO_STREAM"}}"#);
        let config = parse_run_config(&path).unwrap();
        let resolved = config.train.resolve(config.model.family, config.model.cell());
        assert_eq!(resolved.batch_size, 16);
        assert_eq!(resolved.initial_lr, 5e-4);
        assert_eq!(resolved.dropout_rate, 0.05);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let path = write_temp(
            "bad.json",
            r#"{"model": {"family": "I3D_MINI"}, "train": {"momentmu": 0.9}}"#,
        );
        let err = parse_run_config(&path).unwrap_err();
        assert!(format!("{err:#}").contains("momentmu"), "{err:#}");
        fs::remove_file(&path).ok();
    }

    #[test]
    fn resolved_snapshot_round_trips_through_the_same_schema() {
        let overrides = TrainOverrides {
            initial_lr: Some(2e-3),
            ..Default::default()
        };
        let resolved = overrides.resolve(Family::CnnRnnScratch, RnnCell::Lstm);
        assert_eq!(resolved.batch_size, 8);
        assert_eq!(resolved.dropout_rate, 0.4);
        let snapshot = TrainOverrides::from_resolved(&resolved);
        let json = serde_json::to_string(&snapshot).unwrap();
        let back: TrainOverrides = serde_json::from_str(&json).unwrap();
        assert_eq!(back.resolve(Family::CnnRnnScratch, RnnCell::Lstm), resolved);
    }

    #[test]
    fn per_family_lr_and_batch_defaults() {
        assert_eq!(default_lr(Family::FusionSingleInput), 1e-4);
        assert_eq!(default_lr(Family::FusionDualInput), 1e-4);
        assert_eq!(default_batch_size(Family::FusionCombination, RnnCell::Gru), 16);
        assert_eq!(default_batch_size(Family::CnnRnnScratch, RnnCell::Gru), 4);
        assert_eq!(default_batch_size(Family::I3dOriginal, RnnCell::Gru), 2);
    }

    #[test]
    fn dataset_validation() {
        let path = write_temp(
            "ds.json",
            r#"{"model": {"family": "I3D_MINI"}, "dataset": {"ef_range": [2, 95]}}"#,
        );
        assert!(parse_run_config(&path).is_err());
        fs::remove_file(&path).ok();
    }
}
