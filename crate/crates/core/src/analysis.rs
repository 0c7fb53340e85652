//! Validation statistics: within-path residuals, per-frequency curves,
//! histograms, interfrequency correlation, map prediction, ensemble
//! convergence and the station-density experiment.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::cgm::{dataset_conditions, ensemble_stats, generate, train, ArchConfig, CgmFasModel, ConditioningVector, TrainingConfig};
use crate::dataset::{kmeans_station_subset, ResidualDataset};
use crate::format::sig9;
use crate::geo::{GeoPoint, LocalFrame, PathGeometry};
use crate::gp::{predict, GpFit, KernelPath};
use crate::variogram::{fit_squared_exponential, planar_semivariogram, Binning, Nugget, Semivariogram, VariogramFit};
use crate::{Error, Result};

/// Residual histogram layout: uniform bins over `[-HIST_RANGE, HIST_RANGE]`.
pub const HIST_BINS: usize = 41;
pub const HIST_RANGE: f64 = 2.0;

/// Fewest recordings for a correlation matrix.
pub const MIN_CORRELATION_ROWS: usize = 30;

/// Fewest recordings for a density-experiment cell to be trained.
pub const MIN_DENSITY_RECORDINGS: usize = 20;

/// `δWS − δP2P` for every recording.
pub fn within_path_residuals(ds: &ResidualDataset, path_terms: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if path_terms.len() != ds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} path terms for {} recordings",
            path_terms.len(),
            ds.len()
        )));
    }
    ds.recordings
        .iter()
        .zip(path_terms)
        .enumerate()
        .map(|(i, (r, p))| {
            if p.len() != r.dws.len() {
                return Err(Error::InvalidArgument(format!(
                    "recording {i}: {} path-term values for {} frequencies",
                    p.len(),
                    r.dws.len()
                )));
            }
            Ok(r.dws.iter().zip(p).map(|(a, b)| a - b).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    pub mean: Vec<f64>,
    /// Sample standard deviation; 0 with fewer than two rows.
    pub std: Vec<f64>,
}

impl ResidualStats {
    pub fn csv(&self, freqs: &[f64]) -> String {
        let mut s = String::from("freq_hz,mean,std\n");
        for ((f, m), sd) in freqs.iter().zip(&self.mean).zip(&self.std) {
            let _ = writeln!(s, "{},{},{}", sig9(*f), sig9(*m), sig9(*sd));
        }
        s
    }
}

pub fn residual_stats(rows: &[Vec<f64>]) -> ResidualStats {
    let nf = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mut mean = vec![0.0; nf];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; nf];
    if rows.len() > 1 {
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
    }
    ResidualStats { mean, std }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn bin_center(&self, i: usize) -> f64 {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        self.lo + (i as f64 + 0.5) * w
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("bin_center,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{c}", sig9(self.bin_center(i)));
        }
        s
    }
}

/// Uniform bins over `[lo, hi)`; the top edge belongs to the last bin.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::InvalidArgument(format!("histogram needs bins > 0 and hi > lo, got {bins}, [{lo}, {hi}]")));
    }
    let mut h = Histogram {
        lo,
        hi,
        counts: vec![0; bins],
        underflow: 0,
        overflow: 0,
    };
    let w = (hi - lo) / bins as f64;
    for &v in values {
        if v < lo {
            h.underflow += 1;
        } else if v > hi || v.is_nan() {
            h.overflow += 1;
        } else {
            h.counts[(((v - lo) / w) as usize).min(bins - 1)] += 1;
        }
    }
    Ok(h)
}

/// Pearson correlation between frequencies across recordings.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub freqs: Vec<f64>,
    /// Row-major `F × F`; NaN in rows and columns of masked frequencies.
    pub values: Vec<f64>,
    /// Frequencies with zero variance.
    pub masked: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    /// Largest `|a − b|` over pairs inside `band` where both are defined.
    pub fn max_abs_deviation(&self, other: &CorrelationMatrix, band: std::ops::Range<usize>) -> f64 {
        let mut worst = 0.0f64;
        for i in band.clone() {
            for j in band.clone() {
                let d = (self.get(i, j) - other.get(i, j)).abs();
                if d.is_finite() {
                    worst = worst.max(d);
                }
            }
        }
        worst
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("freq_hz");
        for f in &self.freqs {
            let _ = write!(s, ",{}", sig9(*f));
        }
        s.push('\n');
        for (i, f) in self.freqs.iter().enumerate() {
            s.push_str(&sig9(*f));
            for j in 0..self.len() {
                let v = self.get(i, j);
                s.push(',');
                if v.is_finite() {
                    s.push_str(&sig9(v));
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn interfrequency_correlation(freqs: &[f64], rows: &[Vec<f64>]) -> Result<CorrelationMatrix> {
    if rows.len() < MIN_CORRELATION_ROWS {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least {MIN_CORRELATION_ROWS} recordings, got {}",
            rows.len()
        )));
    }
    let nf = freqs.len();
    if rows.iter().any(|r| r.len() != nf) {
        return Err(Error::InvalidArgument(format!("rows must have {nf} values")));
    }
    let stats = residual_stats(rows);
    let centered: Vec<Vec<f64>> = (0..nf)
        .map(|f| rows.iter().map(|r| r[f] - stats.mean[f]).collect())
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let scale = norms.iter().fold(0.0f64, |a, b| a.max(*b));
    let masked: Vec<bool> = norms.iter().map(|n| *n <= 1e-12 * scale.max(1e-300)).collect();
    let mut values = vec![f64::NAN; nf * nf];
    for i in 0..nf {
        if masked[i] {
            continue;
        }
        values[i * nf + i] = 1.0;
        for j in i + 1..nf {
            if masked[j] {
                continue;
            }
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * nf + j] = r;
            values[j * nf + i] = r;
        }
    }
    Ok(CorrelationMatrix {
        freqs: freqs.to_vec(),
        values,
        masked,
    })
}

/// Regular lattice of map sites in a local frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapGrid {
    pub frame: LocalFrame,
    pub x_km: [f64; 2],
    pub y_km: [f64; 2],
    pub spacing_km: f64,
}

impl MapGrid {
    pub fn new(frame: LocalFrame, x_km: [f64; 2], y_km: [f64; 2], spacing_km: f64) -> Result<Self> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[1] >= r[0];
        if !(spacing_km.is_finite() && spacing_km > 0.0) || !ok(x_km) || !ok(y_km) {
            return Err(Error::InvalidArgument(format!(
                "map grid needs positive spacing and ordered ranges, got {spacing_km} km, {x_km:?}, {y_km:?}"
            )));
        }
        Ok(Self {
            frame,
            x_km,
            y_km,
            spacing_km,
        })
    }

    /// `n × n` sites centred on `center` (frame km).
    pub fn square(frame: LocalFrame, center: [f64; 2], n: usize, spacing_km: f64) -> Result<Self> {
        let half = 0.5 * spacing_km * n.saturating_sub(1) as f64;
        Self::new(
            frame,
            [center[0] - half, center[0] + half],
            [center[1] - half, center[1] + half],
            spacing_km,
        )
    }

    /// Lattice over the dataset's event and station bounding box.
    pub fn covering(ds: &ResidualDataset, spacing_km: f64) -> Result<Self> {
        let pts: Vec<[f64; 2]> = ds
            .events
            .iter()
            .map(|e| ds.frame.project(&e.location))
            .chain(ds.station_xy())
            .collect();
        if pts.is_empty() {
            return Err(Error::InvalidArgument("dataset has no locations".into()));
        }
        let lo = |d: usize| pts.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
        let hi = |d: usize| pts.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
        Self::new(ds.frame, [lo(0), hi(0)], [lo(1), hi(1)], spacing_km)
    }

    fn axis(&self, r: [f64; 2]) -> Vec<f64> {
        let n = ((r[1] - r[0]) / self.spacing_km + 1e-9).floor() as usize + 1;
        (0..n).map(|i| r[0] + i as f64 * self.spacing_km).collect()
    }

    /// Sites in row-major order (y outer, x inner).
    pub fn sites(&self) -> Vec<[f64; 2]> {
        let xs = self.axis(self.x_km);
        self.axis(self.y_km)
            .into_iter()
            .flat_map(|y| xs.iter().map(move |&x| [x, y]))
            .collect()
    }
}

/// Path-term source for [`predict_map`].
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Gp(&'a GpFit),
    Cgm {
        model: &'a CgmFasModel,
        ensemble: usize,
        seed: u64,
    },
}

/// Path terms from one event to every lattice site; arrays are
/// site-major `[site × frequency]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    pub event: GeoPoint,
    pub frame: LocalFrame,
    pub sites: Vec<[f64; 2]>,
    pub freqs: Vec<f64>,
    pub path_term: Vec<f64>,
    /// Ensemble spread (generative predictor only).
    pub aleatory_std: Option<Vec<f64>>,
    /// Posterior standard deviation (GP predictor only).
    pub epistemic_sd: Option<Vec<f64>>,
}

impl PredictionMap {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Path term at frequency position `f` for every site.
    pub fn column(&self, f: usize) -> Vec<f64> {
        let nf = self.freqs.len();
        (0..self.n_sites()).map(|s| self.path_term[s * nf + f]).collect()
    }

    /// Long format `lon,lat,freq_hz,path_term,aleatory_std,epistemic_sd`.
    pub fn csv(&self) -> String {
        let nf = self.freqs.len();
        let mut s = String::from("lon,lat,freq_hz,path_term,aleatory_std,epistemic_sd\n");
        let opt = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map_or(String::new(), |v| sig9(v[i]));
        for (si, xy) in self.sites.iter().enumerate() {
            let g = self.frame.unproject(*xy, 0.0);
            let (lon, lat) = (sig9(g.lon), sig9(g.lat));
            for (fi, f) in self.freqs.iter().enumerate() {
                let i = si * nf + fi;
                let _ = writeln!(
                    s,
                    "{lon},{lat},{},{},{},{}",
                    sig9(*f),
                    sig9(self.path_term[i]),
                    opt(&self.aleatory_std, i),
                    opt(&self.epistemic_sd, i)
                );
            }
        }
        s
    }

    /// Empirical semivariogram and squared-exponential fit (zero nugget) of
    /// the map at frequency position `f`.
    pub fn variogram(&self, f: usize, binning: Binning) -> Result<(Semivariogram, VariogramFit)> {
        let sv = planar_semivariogram(&self.sites, &self.column(f), binning)?;
        let fit = fit_squared_exponential(&sv, Nugget::Zero)?;
        Ok((sv, fit))
    }
}

/// Evaluates `predictor` at every lattice site for the frequencies at
/// `freq_indices` (positions in the predictor's grid).
pub fn predict_map(predictor: Predictor<'_>, event: &GeoPoint, grid: &MapGrid, freq_indices: &[usize]) -> Result<PredictionMap> {
    event.validate()?;
    let exy = grid.frame.project(event);
    if !grid.frame.contains(exy) {
        return Err(Error::Geometry(format!(
            "event ({}, {}) lies outside the map frame",
            event.lat, event.lon
        )));
    }
    let sites = grid.sites();
    let nf = freq_indices.len();
    let n_grid = match predictor {
        Predictor::Gp(fit) => fit.n_freq(),
        Predictor::Cgm { model, .. } => model.arch.n_freq,
    };
    if let Some(bad) = freq_indices.iter().find(|&&f| f >= n_grid) {
        return Err(Error::InvalidArgument(format!("frequency index {bad} outside a {n_grid}-point grid")));
    }
    let mut path_term = vec![0.0; sites.len() * nf];
    let mut spread = vec![0.0; sites.len() * nf];
    let freqs: Vec<f64>;
    match predictor {
        Predictor::Cgm { model, ensemble, seed } => {
            freqs = freq_indices.iter().map(|&f| model.norm.freqs[f]).collect();
            let conds: Vec<ConditioningVector> = sites
                .iter()
                .map(|s| model.norm.condition(event, &grid.frame.unproject(*s, 0.0)))
                .collect();
            for (s, st) in ensemble_stats(model, &conds, ensemble, seed)?.into_iter().enumerate() {
                for (j, &f) in freq_indices.iter().enumerate() {
                    path_term[s * nf + j] = st.mean[f];
                    spread[s * nf + j] = st.std[f];
                }
            }
        }
        Predictor::Gp(fit) => {
            freqs = freq_indices.iter().map(|&f| fit.frequencies()[f].freq_hz).collect();
            let targets = sites
                .iter()
                .map(|s| PathGeometry::from_xy(exy, event.depth, *s).map(KernelPath::target))
                .collect::<Result<Vec<_>>>()?;
            let preds = freq_indices
                .par_iter()
                .map(|&f| predict(fit, f, &targets))
                .collect::<Result<Vec<_>>>()?;
            for (j, p) in preds.iter().enumerate() {
                for s in 0..sites.len() {
                    path_term[s * nf + j] = p.mean[s];
                    spread[s * nf + j] = p.epistemic_sd[s];
                }
            }
        }
    }
    if path_term.iter().chain(&spread).any(|v| !v.is_finite()) {
        return Err(Error::Training("map contains non-finite values".into()));
    }
    let (aleatory_std, epistemic_sd) = match predictor {
        Predictor::Gp(_) => (None, Some(spread)),
        Predictor::Cgm { .. } => (Some(spread), None),
    };
    Ok(PredictionMap {
        event: *event,
        frame: grid.frame,
        sites,
        freqs,
        path_term,
        aleatory_std,
        epistemic_sd,
    })
}

/// Running ensemble statistics; entry `n − 1` summarizes the first `n`
/// generations.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceCurve {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl ConvergenceCurve {
    /// `‖x(b) − x(a)‖ / ‖x(b)‖` over frequencies for the mean and the std,
    /// comparing ensemble sizes `a` and `b`.
    pub fn relative_drift(&self, a: usize, b: usize) -> (f64, f64) {
        let rel = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
            let n: f64 = y.iter().map(|q| q * q).sum();
            (d / n).sqrt()
        };
        (
            rel(&self.mean[a - 1], &self.mean[b - 1]),
            rel(&self.std[a - 1], &self.std[b - 1]),
        )
    }
}

/// Cumulative mean and sample std over one seeded stream of `max_n`
/// generations (the same stream as [`generate`]).
pub fn convergence_curve(model: &CgmFasModel, cond: ConditioningVector, max_n: usize, seed: u64) -> Result<ConvergenceCurve> {
    let samples = generate(model, cond, max_n, seed)?;
    let nf = model.arch.n_freq;
    let (mut sum, mut sum_sq) = (vec![0.0; nf], vec![0.0; nf]);
    let mut curve = ConvergenceCurve {
        mean: Vec::with_capacity(max_n),
        std: Vec::with_capacity(max_n),
    };
    // Welford updates keep the running variance stable.
    for (k, s) in samples.iter().enumerate() {
        let n = (k + 1) as f64;
        for f in 0..nf {
            let delta = s[f] - sum[f];
            sum[f] += delta / n;
            sum_sq[f] += delta * (s[f] - sum[f]);
        }
        curve.mean.push(sum.clone());
        curve
            .std
            .push(sum_sq.iter().map(|v| if k == 0 { 0.0 } else { (v / (n - 1.0)).sqrt() }).collect());
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityConfig {
    pub separations_km: Vec<f64>,
    pub n_subsets: usize,
    pub seed: u64,
    /// Evaluation frequency; the nearest grid point is used.
    pub freq_hz: f64,
    pub ensemble: usize,
    pub arch: ArchConfig,
    pub training: TrainingConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityCell {
    pub separation_km: f64,
    pub subset: usize,
    pub n_stations: usize,
    pub n_recordings: usize,
    /// `None` when the subset had too few recordings to train.
    pub mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityTable {
    pub freq_hz: f64,
    pub cells: Vec<DensityCell>,
}

impl DensityTable {
    /// `(separation, mean MSE over available subsets)` in sweep order.
    pub fn means(&self) -> Vec<(f64, Option<f64>)> {
        let mut seps: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !seps.contains(&c.separation_km) {
                seps.push(c.separation_km);
            }
        }
        seps.into_iter()
            .map(|s| {
                let v: Vec<f64> = self.cells.iter().filter(|c| c.separation_km == s).filter_map(|c| c.mse).collect();
                (s, (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("separation_km,subset,n_stations,n_recordings,mse\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                sig9(c.separation_km),
                c.subset,
                c.n_stations,
                c.n_recordings,
                c.mse.map_or(String::new(), sig9)
            );
        }
        s
    }
}

/// For each `(separation, subset)`: keep a k-means station subset, retrain,
/// predict at every original pair and score within-path residual MSE.
pub fn density_experiment(ds: &ResidualDataset, cfg: &DensityConfig) -> Result<DensityTable> {
    if cfg.n_subsets == 0 || cfg.separations_km.is_empty() {
        return Err(Error::InvalidArgument("density experiment needs separations and subsets".into()));
    }
    let fi = ds.grid.nearest_index(cfg.freq_hz);
    let jobs: Vec<(f64, usize)> = cfg
        .separations_km
        .iter()
        .flat_map(|&s| (0..cfg.n_subsets).map(move |k| (s, k)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(sep, k)| {
            let seed = cfg.seed.wrapping_add(k as u64);
            let subset = kmeans_station_subset(ds, sep, seed)?;
            let sub = ds.restrict_to_stations(&subset.station_ids)?;
            let mut cell = DensityCell {
                separation_km: sep,
                subset: k,
                n_stations: subset.station_ids.len(),
                n_recordings: sub.len(),
                mse: None,
            };
            if sub.len() >= MIN_DENSITY_RECORDINGS {
                let tcfg = TrainingConfig {
                    seed,
                    ..cfg.training.clone()
                };
                let model = train(&sub, cfg.arch, &tcfg)?.model;
                let stats = ensemble_stats(&model, &dataset_conditions(&model, ds), cfg.ensemble, seed)?;
                let sq: f64 = ds.recordings.iter().zip(&stats).map(|(r, s)| (r.dws[fi] - s.mean[fi]).powi(2)).sum();
                cell.mse = Some(sq / ds.len() as f64);
            }
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityTable {
        freq_hz: ds.grid.values()[fi],
        cells,
    })
}
