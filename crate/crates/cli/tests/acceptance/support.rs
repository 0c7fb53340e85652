use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fasgen_core::cgm::{calibrate_alpha, default_alpha_grid, ArchConfig, Calibration, TrainingConfig};
use fasgen_core::dataset::{synth_generate, ResidualDataset, SynthConfig};

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }

    pub fn fail(detail: String) -> Self {
        Self { pass: false, detail }
    }
}

/// Nugget of the calibration data and the tolerance on reaching it.
pub const TARGET_STD: f64 = 0.40;
pub const TARGET_TOL: f64 = 0.03;
/// Epochs per calibration run; early stopping is off.
pub const CALIBRATION_EPOCHS: usize = 1000;
/// KL weights beyond the default sweep range.
pub const EXTENDED_ALPHAS: [f64; 8] = [1e-2, 2e-2, 3e-2, 5e-2, 1e-1, 0.3, 1.0, 3.0];
/// Points of the default sweep range included in the run.
pub const DEFAULT_SWEEP_POINTS: usize = 4;
/// Allowed rise in residual std between neighbouring sweep rows, the
/// Monte Carlo spread of the std estimate.
pub const MONOTONE_SLACK: f64 = 0.01;
pub const DATA_SEED: u64 = 1;

/// Synthetic data for the generative criteria: default network with
/// observation noise correlated across frequency like real residuals.
pub fn acceptance_config() -> SynthConfig {
    SynthConfig {
        noise_freq_corr_octaves: NOISE_CORR_OCTAVES,
        ..SynthConfig::default()
    }
}

pub const NOISE_CORR_OCTAVES: f64 = 0.5;

pub fn calibration_training() -> TrainingConfig {
    TrainingConfig {
        max_epochs: CALIBRATION_EPOCHS,
        patience: CALIBRATION_EPOCHS,
        val_fraction: 0.0,
        ..TrainingConfig::default()
    }
}

pub struct Calibrated {
    pub ds: ResidualDataset,
    pub cal: Calibration,
    pub secs: f64,
}

#[derive(Default)]
pub struct Shared {
    calibrated: Option<Calibrated>,
}

impl Shared {
    /// Sweep over the default range plus [`EXTENDED_ALPHAS`], trained once.
    pub fn calibrated(&mut self) -> Result<&Calibrated, String> {
        if self.calibrated.is_none() {
            let t = Instant::now();
            let (ds, _) = synth_generate(&acceptance_config(), DATA_SEED).map_err(|e| e.to_string())?;
            let mut grid = default_alpha_grid(DEFAULT_SWEEP_POINTS);
            grid.extend(EXTENDED_ALPHAS);
            let cal = calibrate_alpha(
                &ds,
                ArchConfig::new(ds.n_freq()),
                &calibration_training(),
                &grid,
                TARGET_STD,
                TARGET_TOL,
            )
            .map_err(|e| e.to_string())?;
            self.calibrated = Some(Calibrated {
                ds,
                cal,
                secs: t.elapsed().as_secs_f64(),
            });
        }
        Ok(self.calibrated.as_ref().expect("set above"))
    }
}

/// Runs the `fasgen` binary; stdout on success.
pub fn fasgen(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fasgen"))
        .args(args)
        .output()
        .map_err(|e| format!("spawning fasgen: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "fasgen {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

pub fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}
