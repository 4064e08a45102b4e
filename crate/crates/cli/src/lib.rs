//! Configuration schema and experiment runner behind the `echozoo` binary:
//! JSON-driven single runs, the normalization/kernel ablation grid, model
//! reload evaluation, and plot-data emission.

pub mod config;
pub mod runner;

pub use config::{
    parse_grid_config, parse_run_config, DatasetSpec, GenerateConfig, GridSpec, RunConfig,
    TrainOverrides,
};
pub use runner::{emit_plot_data, evaluate_model, run_experiment, run_grid, RunArtifacts};
