use std::fmt::Write as _;

use rayon::prelude::*;

use super::generate::{dataset_conditions, ensemble_stats, DEFAULT_ENSEMBLE};
use super::model::CgmFasModel;
use super::train::{train, TrainOutcome, TrainingConfig};
use super::ArchConfig;
use crate::dataset::ResidualDataset;
use crate::format::sig9;
use crate::{Error, Result};

/// Fraction of the grid trimmed from each end for mid-band statistics.
pub const MID_BAND_EDGE: f64 = 0.2;

/// `n` log-spaced KL weights over `[5e-7, 3e-4]`.
pub fn default_alpha_grid(n: usize) -> Vec<f64> {
    let (lo, hi) = (5e-7f64.ln(), 3e-4f64.ln());
    match n {
        0 => Vec::new(),
        1 => vec![3e-5],
        _ => (0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp()).collect(),
    }
}

/// Mid-band within-path residual statistics of a model over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MidBandStats {
    /// `sqrt` of the mid-band mean of per-frequency residual variances.
    pub residual_std: f64,
    /// Largest absolute per-frequency residual mean in the mid-band.
    pub max_abs_mean: f64,
    /// Mid-band mean of the ensemble standard deviation.
    pub ensemble_std: f64,
}

/// Residuals `δWS − δP2P` with `δP2P` the ensemble mean at each recording.
pub fn mid_band_residual_std(model: &CgmFasModel, ds: &ResidualDataset, n: usize, seed: u64) -> Result<MidBandStats> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let stats = ensemble_stats(model, &dataset_conditions(model, ds), n, seed)?;
    let band = ds.grid.interior(MID_BAND_EDGE);
    let rows = ds.len() as f64;
    let (mut var_sum, mut max_abs_mean, mut ens) = (0.0, 0.0f64, 0.0);
    for f in band.clone() {
        let res: Vec<f64> = ds.recordings.iter().zip(&stats).map(|(r, s)| r.dws[f] - s.mean[f]).collect();
        let mean = res.iter().sum::<f64>() / rows;
        var_sum += res.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
        max_abs_mean = max_abs_mean.max(mean.abs());
        ens += stats.iter().map(|s| s.std[f]).sum::<f64>() / rows;
    }
    let nb = band.len() as f64;
    Ok(MidBandStats {
        residual_std: (var_sum / nb).sqrt(),
        max_abs_mean,
        ensemble_std: ens / nb,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationRow {
    pub alpha: f64,
    pub stats: MidBandStats,
    pub best_epoch: usize,
    pub final_val_total: f64,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    /// Sweep table in ascending `alpha`.
    pub rows: Vec<CalibrationRow>,
    pub best_index: usize,
    pub alpha: f64,
    /// Whether the selected row is within tolerance of the target.
    pub within_tolerance: bool,
    pub model: CgmFasModel,
    pub outcome_log: Vec<super::LossRecord>,
}

impl Calibration {
    /// Whether residual std is non-increasing in `alpha` up to `slack`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].stats.residual_std <= w[0].stats.residual_std + slack)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("alpha,residual_std,ensemble_std,max_abs_mean,best_epoch,val_total,selected\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                sig9(r.alpha),
                sig9(r.stats.residual_std),
                sig9(r.stats.ensemble_std),
                sig9(r.stats.max_abs_mean),
                r.best_epoch,
                sig9(r.final_val_total),
                u8::from(i == self.best_index)
            );
        }
        s
    }
}

/// Trains one model per `alpha` (concurrently) and keeps the one whose
/// mid-band residual std is nearest `target`.
pub fn calibrate_alpha(
    ds: &ResidualDataset,
    arch: ArchConfig,
    base: &TrainingConfig,
    alpha_grid: &[f64],
    target: f64,
    tol: f64,
) -> Result<Calibration> {
    let mut grid = alpha_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    if grid.len() < 2 || grid.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::InvalidArgument("alpha grid needs at least two positive values".into()));
    }
    if grid[grid.len() - 1] / grid[0] < 100.0 - 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "alpha grid must span at least two decades, got {} .. {}",
            grid[0],
            grid[grid.len() - 1]
        )));
    }
    let runs: Vec<(CalibrationRow, TrainOutcome)> = grid
        .par_iter()
        .map(|&alpha| {
            let out = train(ds, arch, &TrainingConfig { alpha, ..base.clone() })?;
            let stats = mid_band_residual_std(&out.model, ds, DEFAULT_ENSEMBLE, base.seed)?;
            let row = CalibrationRow {
                alpha,
                stats,
                best_epoch: out.best_epoch,
                final_val_total: out.log.get(out.best_epoch.saturating_sub(1)).map_or(f64::NAN, |r| r.val_total),
            };
            Ok((row, out))
        })
        .collect::<Result<_>>()?;
    let best_index = runs
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (a.1 .0.stats.residual_std - target).abs();
            let db = (b.1 .0.stats.residual_std - target).abs();
            da.total_cmp(&db)
        })
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let rows: Vec<CalibrationRow> = runs.iter().map(|r| r.0).collect();
    let best = runs.into_iter().nth(best_index).expect("index in range").1;
    Ok(Calibration {
        within_tolerance: (rows[best_index].stats.residual_std - target).abs() <= tol,
        alpha: rows[best_index].alpha,
        rows,
        best_index,
        model: best.model,
        outcome_log: best.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_spans_documented_range() {
        let g = default_alpha_grid(12);
        assert_eq!(g.len(), 12);
        assert!((g[0] - 5e-7).abs() < 1e-18 && (g[11] - 3e-4).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn narrow_grid_is_rejected() {
        let ds = crate::dataset::synth_generate(&Default::default(), 1).unwrap().0;
        let r = calibrate_alpha(&ds, ArchConfig::new(128), &TrainingConfig::default(), &[1e-5, 1e-4], 0.4, 0.03);
        assert!(r.is_err());
    }
}
