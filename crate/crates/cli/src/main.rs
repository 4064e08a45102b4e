//! `echozoo` command line: synthetic data generation, single training runs,
//! model evaluation, the ablation grid, and plot-data emission. Errors exit
//! nonzero with a machine-readable JSON object on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use echozoo::data::{generate_labeled_clips, write_records, SyntheticParams};
use echozoo_cli::config::{parse_generate_config, parse_grid_config, parse_run_config};
use echozoo_cli::runner::{emit_plot_data, evaluate_model, run_experiment, run_grid};

#[derive(Parser)]
#[command(name = "echozoo", about = "Synthetic ejection-fraction video-regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic clip dataset into a clip-record file.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per the run config and write its artifact directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the model's channel-width multiplier.
        #[arg(long)]
        width_multiplier: Option<f64>,
    },
    /// Evaluate a serialized model against a clip-record file.
    Evaluate {
        /// Directory containing model.json + model.bin.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the normalization/kernel ablation grid and write its summary.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        width_multiplier: Option<f64>,
    },
    /// Regenerate plot-data CSVs from a completed run directory.
    EmitPlots {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { config, out, seed } => {
            let mut spec = parse_generate_config(&config)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let clips = generate_labeled_clips(
                spec.n_clips,
                (spec.ef_range[0], spec.ef_range[1]),
                &SyntheticParams {
                    base_radius: spec.base_radius,
                    cycle_period: spec.cycle_period,
                    noise_std: spec.noise_std,
                    center_jitter: spec.center_jitter,
                    frames: spec.frames,
                    height: spec.height,
                    width: spec.width,
                    ..Default::default()
                },
                spec.seed,
            )?;
            write_records(&clips, &out)?;
            println!("wrote {} clips to {}", clips.len(), out.display());
        }
        Command::Train {
            config,
            out,
            seed,
            width_multiplier,
        } => {
            let mut run_config = parse_run_config(&config)?;
            if let Some(s) = seed {
                run_config.train.seed = Some(s);
            }
            if let Some(w) = width_multiplier {
                run_config.model.width_multiplier = w;
            }
            let artifacts = run_experiment(&run_config, &out)?;
            println!(
                "run {}: status {}, artifacts in {}",
                run_config.model.family.label(),
                artifacts.report.status,
                out.display()
            );
        }
        Command::Evaluate { model, records, out } => {
            let report = evaluate_model(
                &model.join("model.json"),
                &model.join("model.bin"),
                &records,
                &out,
            )?;
            let rmse = report.test.map(|m| m.rmse).unwrap_or(f64::NAN);
            println!("evaluated: test RMSE {rmse}");
        }
        Command::Grid {
            config,
            out,
            seed,
            width_multiplier,
        } => {
            let mut spec = parse_grid_config(&config)?;
            if let Some(s) = seed {
                spec.train.seed = Some(s);
                spec.dataset.seed = s;
            }
            if let Some(w) = width_multiplier {
                spec.width_multiplier = w;
            }
            let summary = run_grid(&spec, &out)?;
            println!("grid summary at {}", summary.display());
        }
        Command::EmitPlots { run } => {
            emit_plot_data(&run)?;
            println!("plot data refreshed in {}", run.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({ "error": format!("{e:#}") });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
