//! Command-line workflows: dataset generation, training, evaluation, and
//! inference on a directory of uncalibrated views.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mvhand",
    about = "Feed-forward multi-view hand reconstruction from uncalibrated images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 2)]
        views_min: usize,
        #[arg(long, default_value_t = 10)]
        views_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional run config file; its `generator` section seeds the ranges.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on generated datasets.
    Train {
        /// Run config file (JSON). Flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Multi-view dataset directory.
        #[arg(long)]
        data_multi: Option<PathBuf>,
        /// Optional single-view dataset directory.
        #[arg(long)]
        data_single: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Micro-step budget override.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or external predictions) on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Metric report destination (JSON).
        #[arg(long)]
        out: PathBuf,
        /// PCK-AUC threshold ceiling in millimeters.
        #[arg(long, default_value_t = 50.0)]
        auc_threshold: f64,
        /// Evaluate the ground truth against itself (metric self-test).
        #[arg(long, default_value_t = false)]
        self_test: bool,
        /// Evaluate an external predictions file instead of a checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run inference on a directory of images of one scene.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of view images (sorted by filename).
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits; real parse errors
            // are usage errors.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData {
            out,
            num,
            views_min,
            views_max,
            seed,
            config,
        } => commands::gen_data(out, num, views_min, views_max, seed, config),
        Command::Train {
            config,
            data_multi,
            data_single,
            out,
            steps,
            seed,
            resume,
        } => commands::train(config, data_multi, data_single, out, steps, seed, resume),
        Command::Eval {
            checkpoint,
            data,
            out,
            auc_threshold,
            self_test,
            predictions,
        } => commands::eval(checkpoint, data, out, auc_threshold, self_test, predictions),
        Command::Infer {
            checkpoint,
            images,
            out,
        } => commands::infer(checkpoint, images, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Usage/config problems exit 1; data problems exit 2.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<mvhand_core::Error>() {
        match core {
            mvhand_core::Error::Config(_) | mvhand_core::Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    } else {
        2
    }
}
