//! Posterior prediction, marginal likelihood and variance fitting.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernel::{build_covariance, CorrelationLengths, GpHyperparameters, KernelPath};
use crate::linalg::{cholesky_with_jitter, SpdFactor, JITTER_LADDER};
use crate::{Error, Result};

/// Search box for both standard deviations, ln units.
pub const VARIANCE_BOUNDS: (f64, f64) = (1e-3, 2.0);

const GRID_POINTS: usize = 16;
const MAX_SWEEPS: usize = 500;
const SWEEP_TOL: f64 = 1e-9;
const GOLDEN_TOL: f64 = 1e-11;
const PREDICT_CHUNK: usize = 1024;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `K_obs,obs + phi_sp² I` (smooth part plus the nugget added once).
fn observation_covariance(paths: &[KernelPath], theta: &GpHyperparameters) -> DMatrix<f64> {
    let mut k = build_covariance(paths, paths, theta, false);
    let s2 = theta.phi_sp_ne * theta.phi_sp_ne;
    for i in 0..k.nrows() {
        k[(i, i)] += s2;
    }
    k
}

fn check_obs(obs: &[f64], paths: &[KernelPath]) -> Result<()> {
    if obs.len() != paths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} residuals for {} paths",
            obs.len(),
            paths.len()
        )));
    }
    if obs.is_empty() {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    if let Some(i) = obs.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite residual at observation {i}")));
    }
    Ok(())
}

/// Gaussian marginal log-likelihood of `obs` under `theta`.
pub fn log_likelihood(obs: &[f64], paths: &[KernelPath], theta: &GpHyperparameters) -> Result<f64> {
    check_obs(obs, paths)?;
    theta.validate()?;
    let factor = cholesky_with_jitter(&observation_covariance(paths, theta), &JITTER_LADDER)?;
    let y = DVector::from_column_slice(obs);
    let alpha = factor.solve(&y);
    let n = obs.len() as f64;
    Ok(-0.5 * y.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * n * LN_2PI)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceFit {
    pub phi_p2p: f64,
    pub phi_sp_ne: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub sweeps: usize,
}

/// Eigendecomposition of the unit-variance smooth kernel. With it the
/// likelihood for any `(phi_p2p, phi_sp)` costs O(n).
pub struct KernelSpectrum {
    eigenvalues: Vec<f64>,
    basis: DMatrix<f64>,
}

impl KernelSpectrum {
    pub fn new(paths: &[KernelPath], lengths: CorrelationLengths) -> Self {
        let unit = GpHyperparameters::new(lengths, 1.0, 1.0);
        let eig = SymmetricEigen::new(build_covariance(paths, paths, &unit, false));
        Self {
            eigenvalues: eig.eigenvalues.iter().map(|l| l.max(0.0)).collect(),
            basis: eig.eigenvectors,
        }
    }

    /// Maximizes the likelihood over `VARIANCE_BOUNDS²`: a log-spaced grid
    /// followed by coordinate golden-section sweeps in log space.
    pub fn fit(&self, obs: &[f64]) -> Result<VarianceFit> {
        if obs.len() != self.eigenvalues.len() {
            return Err(Error::InvalidArgument(format!(
                "{} residuals for a {}-path kernel",
                obs.len(),
                self.eigenvalues.len()
            )));
        }
        if obs.len() < 10 {
            return Err(Error::InvalidArgument(format!(
                "variance fit needs at least 10 observations, got {}",
                obs.len()
            )));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite residual".into()));
        }
        let b2: Vec<f64> = (self.basis.transpose() * DVector::from_column_slice(obs))
            .iter()
            .map(|v| v * v)
            .collect();
        let n = obs.len() as f64;
        let nll = |u: f64, v: f64| -> f64 {
            let (p2, s2) = ((2.0 * u).exp(), (2.0 * v).exp());
            let mut acc = 0.0;
            for (l, b) in self.eigenvalues.iter().zip(&b2) {
                let d = p2 * l + s2;
                acc += b / d + d.ln();
            }
            0.5 * acc + 0.5 * n * LN_2PI
        };
        let (lo, hi) = (VARIANCE_BOUNDS.0.ln(), VARIANCE_BOUNDS.1.ln());
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        let mut best = (lo, lo, f64::INFINITY);
        for i in 0..GRID_POINTS {
            for j in 0..GRID_POINTS {
                let (u, v) = (lo + i as f64 * step, lo + j as f64 * step);
                let f = nll(u, v);
                if f < best.2 {
                    best = (u, v, f);
                }
            }
        }
        let (mut u, mut v, mut f) = best;
        let mut converged = false;
        let mut sweeps = 0;
        while sweeps < MAX_SWEEPS {
            sweeps += 1;
            let (u0, v0) = (u, v);
            (u, f) = golden(|x| nll(x, v), u, f, (u - step).max(lo), (u + step).min(hi));
            (v, f) = golden(|x| nll(u, x), v, f, (v - step).max(lo), (v + step).min(hi));
            if (u - u0).abs() < SWEEP_TOL && (v - v0).abs() < SWEEP_TOL {
                converged = true;
                break;
            }
        }
        Ok(VarianceFit {
            phi_p2p: u.exp(),
            phi_sp_ne: v.exp(),
            log_likelihood: -f,
            converged,
            sweeps,
        })
    }
}

/// Golden-section minimization on `[a, b]`; never returns a point worse than
/// the incumbent `(x0, f0)`.
fn golden(f: impl Fn(f64) -> f64, x0: f64, f0: f64, mut a: f64, mut b: f64) -> (f64, f64) {
    const R: f64 = 0.618_033_988_749_894_8;
    let mut c = b - R * (b - a);
    let mut d = a + R * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - R * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + R * (b - a);
            fd = f(d);
        }
    }
    let (x, fx) = if fc < fd { (c, fc) } else { (d, fd) };
    if fx < f0 {
        (x, fx)
    } else {
        (x0, f0)
    }
}

/// Variance MLE with the correlation lengths held fixed.
pub fn fit_variances(obs: &[f64], paths: &[KernelPath], lengths: CorrelationLengths) -> Result<VarianceFit> {
    check_obs(obs, paths)?;
    for v in [lengths.rho_r, lengths.rho_az, lengths.rho_s] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidArgument(format!("correlation lengths must be positive: {lengths:?}")));
        }
    }
    KernelSpectrum::new(paths, lengths).fit(obs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpPrediction {
    pub mean: Vec<f64>,
    pub epistemic_sd: Vec<f64>,
}

/// Factorized posterior at one frequency.
#[derive(Clone, Debug)]
pub struct FrequencyFit {
    pub freq_hz: f64,
    pub theta: GpHyperparameters,
    factor: SpdFactor,
    alpha: DVector<f64>,
}

impl FrequencyFit {
    pub fn new(paths: &[KernelPath], obs: &[f64], theta: GpHyperparameters, freq_hz: f64) -> Result<Self> {
        check_obs(obs, paths)?;
        theta.validate()?;
        let factor = cholesky_with_jitter(&observation_covariance(paths, &theta), &JITTER_LADDER)?;
        let alpha = factor.solve(&DVector::from_column_slice(obs));
        Ok(Self {
            freq_hz,
            theta,
            factor,
            alpha,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.factor.jitter
    }
}

/// Observation paths plus one factorized posterior per frequency. Immutable
/// once built; a new `theta` needs a new fit.
#[derive(Clone, Debug)]
pub struct GpFit {
    paths: Vec<KernelPath>,
    fits: Vec<FrequencyFit>,
}

impl GpFit {
    /// `columns[f]` holds the residuals at frequency `f` in path order.
    pub fn new(paths: Vec<KernelPath>, freqs: &[f64], columns: &[Vec<f64>], thetas: &[GpHyperparameters]) -> Result<Self> {
        if columns.len() != freqs.len() || thetas.len() != freqs.len() {
            return Err(Error::InvalidArgument("frequency, residual and parameter counts differ".into()));
        }
        let fits = (0..freqs.len())
            .into_par_iter()
            .map(|f| FrequencyFit::new(&paths, &columns[f], thetas[f], freqs[f]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { paths, fits })
    }

    pub fn paths(&self) -> &[KernelPath] {
        &self.paths
    }

    pub fn frequencies(&self) -> &[FrequencyFit] {
        &self.fits
    }

    pub fn n_freq(&self) -> usize {
        self.fits.len()
    }
}

/// Posterior mean and epistemic standard deviation of the path term at
/// `targets`, for the fit at `freq_index`.
pub fn predict(fit: &GpFit, freq_index: usize, targets: &[KernelPath]) -> Result<GpPrediction> {
    let ff = fit
        .fits
        .get(freq_index)
        .ok_or_else(|| Error::InvalidArgument(format!("no fit at frequency index {freq_index}")))?;
    let prior = ff.theta.phi_p2p * ff.theta.phi_p2p;
    let mut mean = Vec::with_capacity(targets.len());
    let mut sd = Vec::with_capacity(targets.len());
    for chunk in targets.chunks(PREDICT_CHUNK) {
        let mut k_op = build_covariance(&fit.paths, chunk, &ff.theta, false);
        mean.extend((k_op.transpose() * &ff.alpha).iter());
        ff.factor.solve_lower(&mut k_op);
        for col in k_op.column_iter() {
            sd.push((prior - col.norm_squared()).max(0.0).sqrt());
        }
    }
    Ok(GpPrediction {
        mean,
        epistemic_sd: sd,
    })
}

/// One frequency's entry in a fit file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRecord {
    pub freq_hz: f64,
    pub phi_p2p: f64,
    pub phi_sp_ne: f64,
    pub rho_r: f64,
    pub rho_az: f64,
    pub rho_s: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Variogram axes whose fitted length sat on the search boundary.
    #[serde(default)]
    pub boundary_axes: Vec<String>,
}

impl FrequencyRecord {
    pub fn theta(&self) -> GpHyperparameters {
        GpHyperparameters {
            phi_p2p: self.phi_p2p,
            phi_sp_ne: self.phi_sp_ne,
            rho_r: self.rho_r,
            rho_az: self.rho_az,
            rho_s: self.rho_s,
        }
    }
}

/// Per-frequency hyperparameters as written by `fit-gp`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub frequency: Vec<FrequencyRecord>,
}

impl FitFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: Self = toml::from_str(text).map_err(|e| Error::Schema(format!("fit file: {e}")))?;
        for r in &f.frequency {
            r.theta().validate()?;
            if !(r.freq_hz.is_finite() && r.freq_hz > 0.0) {
                return Err(Error::Schema(format!("fit file: bad frequency {}", r.freq_hz)));
            }
        }
        Ok(f)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fit file serializes")
    }
}
