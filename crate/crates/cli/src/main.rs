//! Command-line driver: target encoding, evaluation, fit demos, gradient
//! checks, and forward passes over supplied tensors.
//!
//! stdout carries machine-readable JSON only; diagnostics go to stderr.
//! Exit codes are a stable contract: 0 success, 2 parse error, 3 validation
//! error, 4 divergence, 5 gradient-check failure.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use stvg_core::Error;

#[derive(Parser)]
#[command(name = "stvg", version, about = "Anchor-free spatio-temporal grounding numerics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode annotation boxes into Gaussian heatmap and size targets.
    EncodeTargets {
        /// Annotation JSON file.
        #[arg(long)]
        annotations: PathBuf,
        /// Feature-map scale L.
        #[arg(long, default_value_t = 16)]
        map_size: usize,
        /// Gaussian width: "adaptive" or "fixed:<value>".
        #[arg(long, default_value = "adaptive")]
        sigma: String,
        /// Output directory for GKTN tensors and sidecar JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth and print the metrics report.
    Eval {
        /// Ground-truth annotation JSON.
        #[arg(long)]
        gt: PathBuf,
        /// Prediction JSON (same schema plus scores).
        #[arg(long)]
        pred: PathBuf,
        /// Replace predicted intervals with the ground truth before vIoU,
        /// isolating spatial quality.
        #[arg(long)]
        temporal_gt: bool,
    },
    /// Run a synthetic fit demo and record its loss curve.
    FitDemo {
        /// One of: heatmap, sizes, temporal.
        #[arg(long)]
        demo: String,
        /// Gradient steps.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Learning rate; defaults to the demo's documented rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Seed for parameter initialization.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Halve the step whenever it would increase the loss; defaults to
        /// the demo's documented setting.
        #[arg(long)]
        backtracking: Option<bool>,
        /// Output directory for the loss curve CSV and summary JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an analytic gradient against central finite differences.
    Gradcheck {
        /// One of: focal, giou, smooth-l1, boundary.
        #[arg(long)]
        loss: String,
        /// Number of randomized instances.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Relative-error tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Seed for instance generation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full forward pass over supplied feature tensors.
    Forward {
        /// Feature manifest JSON naming the visual and sentence tensors.
        #[arg(long)]
        features: PathBuf,
        /// Weights manifest JSON; omitted, weights come from the config's
        /// init policy and the seed.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Forward configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for predictions, tensors, and generated weights.
        #[arg(long)]
        out: PathBuf,
        /// Seed for generated weights.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Stable mapping from error kinds to exit codes.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Json(_) | Error::Io(_) | Error::TensorFile(_) => 2,
        Error::Diverged { .. } => 4,
        _ => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::EncodeTargets {
            annotations,
            map_size,
            sigma,
            out,
        } => commands::encode_targets(&annotations, map_size, &sigma, &out),
        Command::Eval {
            gt,
            pred,
            temporal_gt,
        } => commands::eval(&gt, &pred, temporal_gt),
        Command::FitDemo {
            demo,
            steps,
            lr,
            seed,
            backtracking,
            out,
        } => commands::fit_demo(&demo, steps, lr, seed, backtracking, &out),
        Command::Gradcheck {
            loss,
            trials,
            tol,
            seed,
        } => commands::gradcheck(&loss, trials, tol, seed),
        Command::Forward {
            features,
            weights,
            config,
            out,
            seed,
        } => commands::forward(&features, weights.as_deref(), &config, &out, seed),
    };

    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
