//! `fasgen`: synthetic data, GP fits, generative-model training, maps,
//! validation statistics and the station-density experiment.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Seeds are limited to the signed 64-bit range so manifests stay valid TOML.
fn seed_arg(s: &str) -> Result<u64, String> {
    let v: u64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > i64::MAX as u64 {
        return Err(format!("seed must be at most {}", i64::MAX));
    }
    Ok(v)
}

#[derive(Parser, Debug)]
#[command(name = "fasgen", version, about = "Non-ergodic path-effect estimation from within-site FAS residuals")]
pub struct Cli {
    /// Worker threads (0 = one per core). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Use the 911-frequency grid and the wider network by default.
    #[arg(long, global = true)]
    pub full_scale: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with known path terms.
    Synth(SynthArgs),
    /// Fit GP correlation lengths and variances per frequency.
    FitGp(FitGpArgs),
    /// Train the conditional VAE, or sweep the KL weight.
    Train(TrainArgs),
    /// Predict a path-term map for one event.
    PredictMap(PredictMapArgs),
    /// Residual statistics, histograms, correlation matrices and variograms.
    Validate(ValidateArgs),
    /// Retrain on k-means station subsets and score at all pairs.
    Density(DensityArgs),
}

/// Working frequency grid used when loading a dataset.
#[derive(Args, Debug, Clone)]
pub struct GridArgs {
    /// Number of working frequencies (default 128, or 911 with --full-scale).
    #[arg(long)]
    pub n_freq: Option<usize>,
    /// Lowest working frequency in Hz.
    #[arg(long, default_value_t = 2.0)]
    pub f_min: f64,
    /// Highest working frequency in Hz.
    #[arg(long, default_value_t = 15.0)]
    pub f_max: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Synthetic config (TOML); defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "0", value_parser = seed_arg)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitGpArgs {
    /// Dataset directory (dataset.csv + frequencies.csv) or dataset file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Frequencies in Hz (comma-separated, nearest grid point) or `all`.
    #[arg(long, default_value = "all")]
    pub freqs: String,
    /// Variogram binning and conditioning caps (TOML).
    #[arg(long)]
    pub variogram: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// KL weight for a single training run.
    #[arg(long, conflicts_with = "calibrate", required_unless_present = "calibrate")]
    pub alpha: Option<f64>,
    /// Sweep the KL weight and keep the model nearest the target std.
    #[arg(long)]
    pub calibrate: bool,
    /// Sweep grid (comma-separated); default 8 log-spaced values in [5e-7, 3e-4].
    #[arg(long, requires = "calibrate")]
    pub alphas: Option<String>,
    /// Target mid-band within-path residual std.
    #[arg(long, default_value_t = 0.40)]
    pub target: f64,
    /// Tolerance on the target.
    #[arg(long, default_value_t = 0.03)]
    pub tol: f64,
    /// Architecture (TOML, all fields); n_freq must match the grid.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Training settings (TOML); defaults for missing keys.
    #[arg(long)]
    pub training: Option<PathBuf>,
    /// Overrides the maximum epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the early-stopping patience.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, default_value = "0", value_parser = seed_arg)]
    pub seed: u64,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictMapArgs {
    /// Generative-model checkpoint.
    #[arg(long, conflicts_with = "fit", required_unless_present = "fit")]
    pub model: Option<PathBuf>,
    /// GP fit file; requires --dataset for the observations.
    #[arg(long, requires = "dataset")]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Event as `lat,lon,depth_km`.
    #[arg(long, allow_hyphen_values = true)]
    pub event: String,
    /// Lattice spacing in km.
    #[arg(long, default_value_t = 1.0)]
    pub grid_km: f64,
    /// Square lattice of N x N sites centred on the event; default covers the domain.
    #[arg(long)]
    pub size: Option<usize>,
    /// Frequencies in Hz (comma-separated, nearest grid point) or `all`.
    #[arg(long, default_value = "all")]
    pub freqs: String,
    /// Generations per site.
    #[arg(long, default_value_t = 200)]
    pub ensemble: usize,
    #[arg(long, default_value = "0", value_parser = seed_arg)]
    pub seed: u64,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Frequency (Hz) for histograms and variograms.
    #[arg(long, default_value_t = 10.0)]
    pub at_hz: f64,
    #[arg(long, default_value_t = 200)]
    pub ensemble: usize,
    #[arg(long, default_value = "0", value_parser = seed_arg)]
    pub seed: u64,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DensityArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Minimum station separations in km.
    #[arg(long, default_value = "5,10,20,35,50")]
    pub separations: String,
    #[arg(long, default_value_t = 5)]
    pub subsets: usize,
    /// Scoring frequency in Hz.
    #[arg(long, default_value_t = 10.0)]
    pub at_hz: f64,
    #[arg(long, default_value_t = 3e-5)]
    pub alpha: f64,
    #[arg(long)]
    pub arch: Option<PathBuf>,
    #[arg(long)]
    pub training: Option<PathBuf>,
    /// Overrides the maximum epoch count per cell.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub ensemble: usize,
    #[arg(long, default_value = "0", value_parser = seed_arg)]
    pub seed: u64,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fasgen_core::Error>() {
        Some(e) => e.exit_code() as u8,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
