//! Empirical semivariograms and squared-exponential fits.

use serde::{Deserialize, Serialize};

use crate::dataset::ResidualDataset;
use crate::format::sig9;
use crate::geo::path_deltas;
use crate::gp::kernel::CorrelationLengths;
use crate::{Error, Result};

pub const MIN_PAIRS: usize = 30;

const RHO_GRID: usize = 200;
const GOLDEN_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub width: f64,
    pub max_lag: f64,
    pub min_pairs: usize,
}

impl Binning {
    pub fn new(width: f64, max_lag: f64) -> Self {
        Self {
            width,
            max_lag,
            min_pairs: MIN_PAIRS,
        }
    }

    fn n_bins(&self) -> usize {
        (self.max_lag / self.width).ceil() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.max_lag > 0.0 && self.width.is_finite() && self.max_lag.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad binning {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Semivariogram {
    pub bin_centers: Vec<f64>,
    pub gamma: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Accumulates `½(v_i − v_j)²` into lag bins and drops sparse bins.
#[derive(Clone, Debug)]
pub struct PairAccumulator {
    binning: Binning,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl PairAccumulator {
    pub fn new(binning: Binning) -> Result<Self> {
        binning.validate()?;
        let n = binning.n_bins();
        Ok(Self {
            binning,
            sums: vec![0.0; n],
            counts: vec![0; n],
        })
    }

    pub fn add(&mut self, lag: f64, vi: f64, vj: f64) {
        if !(0.0..self.binning.max_lag).contains(&lag) {
            return;
        }
        let b = ((lag / self.binning.width) as usize).min(self.sums.len() - 1);
        let d = vi - vj;
        self.sums[b] += 0.5 * d * d;
        self.counts[b] += 1;
    }

    pub fn finish(self) -> Result<Semivariogram> {
        let mut sv = Semivariogram {
            bin_centers: Vec::new(),
            gamma: Vec::new(),
            counts: Vec::new(),
        };
        for (b, (s, c)) in self.sums.iter().zip(&self.counts).enumerate() {
            if *c >= self.binning.min_pairs {
                sv.bin_centers.push((b as f64 + 0.5) * self.binning.width);
                sv.gamma.push(s / *c as f64);
                sv.counts.push(*c);
            }
        }
        if sv.gamma.is_empty() {
            return Err(Error::InsufficientPairs(format!(
                "no lag bin reached {} pairs",
                self.binning.min_pairs
            )));
        }
        Ok(sv)
    }
}

/// Semivariogram of `values` with pair lags from `lag(i, j)`; `None` skips
/// the pair.
pub fn empirical_semivariogram(
    values: &[f64],
    lag: impl Fn(usize, usize) -> Option<f64>,
    binning: Binning,
) -> Result<Semivariogram> {
    let mut acc = PairAccumulator::new(binning)?;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            if let Some(h) = lag(i, j) {
                acc.add(h, values[i], values[j]);
            }
        }
    }
    acc.finish()
}

/// Semivariogram over planar separation of points.
pub fn planar_semivariogram(xy: &[[f64; 2]], values: &[f64], binning: Binning) -> Result<Semivariogram> {
    if xy.len() != values.len() {
        return Err(Error::InvalidArgument("coordinates and values differ in length".into()));
    }
    empirical_semivariogram(
        values,
        |i, j| Some(((xy[i][0] - xy[j][0]).powi(2) + (xy[i][1] - xy[j][1]).powi(2)).sqrt()),
        binning,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nugget {
    Free,
    /// Pinned at zero, for noise-free fields such as predicted maps.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramFit {
    pub sill: f64,
    pub length: f64,
    pub nugget: f64,
    pub rmse: f64,
    /// Length on the edge of the search grid.
    pub boundary: bool,
    /// Structured variance negligible against the nugget.
    pub degenerate: bool,
}

impl VariogramFit {
    pub fn flagged(&self) -> bool {
        self.boundary || self.degenerate
    }

    pub fn model(&self, h: f64) -> f64 {
        self.nugget + self.sill * (1.0 - (-h * h / (2.0 * self.length * self.length)).exp())
    }
}

/// Weighted least-squares `(nugget, sill, sse)` for a fixed length.
fn linear_fit(sv: &Semivariogram, rho: f64, nugget: Nugget) -> (f64, f64, f64) {
    let g: Vec<f64> = sv
        .bin_centers
        .iter()
        .map(|h| 1.0 - (-h * h / (2.0 * rho * rho)).exp())
        .collect();
    let w: Vec<f64> = sv.counts.iter().map(|c| *c as f64).collect();
    let (mut sw, mut sg, mut sgg, mut sy, mut sgy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..g.len() {
        sw += w[i];
        sg += w[i] * g[i];
        sgg += w[i] * g[i] * g[i];
        sy += w[i] * sv.gamma[i];
        sgy += w[i] * g[i] * sv.gamma[i];
    }
    let through_origin = || if sgg > 0.0 { (sgy / sgg).max(0.0) } else { 0.0 };
    let (a, s) = match nugget {
        Nugget::Zero => (0.0, through_origin()),
        Nugget::Free => {
            let det = sw * sgg - sg * sg;
            let (a, s) = if det > 1e-12 * sw * sgg.max(f64::MIN_POSITIVE) {
                ((sgg * sy - sg * sgy) / det, (sw * sgy - sg * sy) / det)
            } else {
                (sy / sw, 0.0)
            };
            if a < 0.0 {
                (0.0, through_origin())
            } else if s < 0.0 {
                (sy / sw, 0.0)
            } else {
                (a, s)
            }
        }
    };
    let sse = (0..g.len())
        .map(|i| w[i] * (sv.gamma[i] - a - s * g[i]).powi(2))
        .sum();
    (a, s, sse)
}

/// Fits `nugget + sill·(1 − exp(−h²/2ρ²))` by weighted least squares over a
/// log-spaced length grid with golden-section refinement.
pub fn fit_squared_exponential(sv: &Semivariogram, nugget: Nugget) -> Result<VariogramFit> {
    if sv.gamma.len() < 4 {
        return Err(Error::InsufficientPairs(format!(
            "squared-exponential fit needs 4 lag bins, got {}",
            sv.gamma.len()
        )));
    }
    let h_lo = sv.bin_centers[0];
    let h_hi = *sv.bin_centers.last().expect("bins");
    let (lo, hi) = ((0.25 * h_lo).ln(), (2.0 * h_hi).ln());
    let step = (hi - lo) / (RHO_GRID - 1) as f64;
    let sse = |x: f64| linear_fit(sv, x.exp(), nugget).2;
    let (mut best_i, mut best) = (0, f64::INFINITY);
    for i in 0..RHO_GRID {
        let e = sse(lo + i as f64 * step);
        if e < best {
            (best_i, best) = (i, e);
        }
    }
    let boundary = best_i == 0 || best_i == RHO_GRID - 1;
    let x0 = lo + best_i as f64 * step;
    let mut a = (x0 - step).max(lo);
    let mut b = (x0 + step).min(hi);
    const R: f64 = 0.618_033_988_749_894_8;
    let mut c = b - R * (b - a);
    let mut d = a + R * (b - a);
    let (mut fc, mut fd) = (sse(c), sse(d));
    while b - a > GOLDEN_TOL {
        if fc < fd {
            (b, d, fd) = (d, c, fc);
            c = b - R * (b - a);
            fc = sse(c);
        } else {
            (a, c, fc) = (c, d, fd);
            d = a + R * (b - a);
            fd = sse(d);
        }
    }
    let (x, fx) = if fc < fd { (c, fc) } else { (d, fd) };
    let x = if fx < best { x } else { x0 };
    let length = x.exp();
    let (nug, sill, sse) = linear_fit(sv, length, nugget);
    let wsum: f64 = sv.counts.iter().map(|c| *c as f64).sum();
    Ok(VariogramFit {
        sill,
        length,
        nugget: nug,
        rmse: (sse / wsum).sqrt(),
        boundary,
        degenerate: sill <= 0.1 * (sill + nug),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariogramConfig {
    pub distance_bin_km: f64,
    pub distance_max_km: f64,
    pub azimuth_bin_deg: f64,
    pub azimuth_max_deg: f64,
    pub cap_r_km: f64,
    pub cap_az_deg: f64,
    pub cap_s_km: f64,
    pub min_pairs: usize,
}

impl Default for VariogramConfig {
    fn default() -> Self {
        Self {
            distance_bin_km: 2.0,
            distance_max_km: 60.0,
            azimuth_bin_deg: 5.0,
            azimuth_max_deg: 90.0,
            cap_r_km: 10.0,
            cap_az_deg: 15.0,
            cap_s_km: 10.0,
            min_pairs: MIN_PAIRS,
        }
    }
}

impl VariogramConfig {
    fn distance_bins(&self) -> Binning {
        Binning {
            width: self.distance_bin_km,
            max_lag: self.distance_max_km,
            min_pairs: self.min_pairs,
        }
    }

    fn azimuth_bins(&self) -> Binning {
        Binning {
            width: self.azimuth_bin_deg,
            max_lag: self.azimuth_max_deg,
            min_pairs: self.min_pairs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AxisFit {
    pub semivariogram: Semivariogram,
    pub fit: VariogramFit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathLengthFit {
    pub r: AxisFit,
    pub az: AxisFit,
    pub s: AxisFit,
}

impl PathLengthFit {
    pub fn lengths(&self) -> CorrelationLengths {
        CorrelationLengths {
            rho_r: self.r.fit.length,
            rho_az: self.az.fit.length,
            rho_s: self.s.fit.length,
        }
    }

    /// Names of axes whose fit is flagged.
    pub fn flagged_axes(&self) -> Vec<String> {
        [("dR", &self.r), ("dAz", &self.az), ("dSS", &self.s)]
            .iter()
            .filter(|(_, a)| a.fit.flagged())
            .map(|(n, _)| n.to_string())
            .collect()
    }
}

/// Pair counts per axis after conditioning, for diagnostics.
pub fn conditioned_pair_counts(ds: &ResidualDataset, cfg: &VariogramConfig) -> Result<[usize; 3]> {
    let geoms = (0..ds.len()).map(|i| ds.geometry(i)).collect::<Result<Vec<_>>>()?;
    let mut n = [0; 3];
    for i in 0..geoms.len() {
        for j in i + 1..geoms.len() {
            let d = path_deltas(&geoms[i], &geoms[j]);
            n[0] += usize::from(d.d_az < cfg.cap_az_deg && d.d_ss < cfg.cap_s_km);
            n[1] += usize::from(d.d_r < cfg.cap_r_km && d.d_ss < cfg.cap_s_km);
            n[2] += usize::from(d.d_r < cfg.cap_r_km && d.d_az < cfg.cap_az_deg);
        }
    }
    Ok(n)
}

/// Marginal variograms along dR, dAz and dSS at one frequency, each using the
/// pairs whose other two deltas fall under the conditioning caps.
pub fn estimate_path_lengths(ds: &ResidualDataset, freq_index: usize, cfg: &VariogramConfig) -> Result<PathLengthFit> {
    if ds.len() < 100 {
        return Err(Error::InsufficientPairs(format!(
            "length estimation needs 100 recordings, got {}",
            ds.len()
        )));
    }
    if freq_index >= ds.n_freq() {
        return Err(Error::InvalidArgument(format!("frequency index {freq_index} out of range")));
    }
    let v = ds.column(freq_index);
    let geoms = (0..ds.len()).map(|i| ds.geometry(i)).collect::<Result<Vec<_>>>()?;
    let mut acc_r = PairAccumulator::new(cfg.distance_bins())?;
    let mut acc_az = PairAccumulator::new(cfg.azimuth_bins())?;
    let mut acc_s = PairAccumulator::new(cfg.distance_bins())?;
    for i in 0..geoms.len() {
        for j in i + 1..geoms.len() {
            let d = path_deltas(&geoms[i], &geoms[j]);
            if d.d_az < cfg.cap_az_deg && d.d_ss < cfg.cap_s_km {
                acc_r.add(d.d_r, v[i], v[j]);
            }
            if d.d_r < cfg.cap_r_km && d.d_ss < cfg.cap_s_km {
                acc_az.add(d.d_az, v[i], v[j]);
            }
            if d.d_r < cfg.cap_r_km && d.d_az < cfg.cap_az_deg {
                acc_s.add(d.d_ss, v[i], v[j]);
            }
        }
    }
    let axis = |acc: PairAccumulator, name: &str| -> Result<AxisFit> {
        let sv = acc
            .finish()
            .map_err(|e| Error::InsufficientPairs(format!("{name} axis: {e}")))?;
        let fit = fit_squared_exponential(&sv, Nugget::Free)
            .map_err(|e| Error::InsufficientPairs(format!("{name} axis: {e}")))?;
        Ok(AxisFit { semivariogram: sv, fit })
    };
    Ok(PathLengthFit {
        r: axis(acc_r, "dR")?,
        az: axis(acc_az, "dAz")?,
        s: axis(acc_s, "dSS")?,
    })
}

/// `bin_center,gamma,count` rows followed by a `# fit` summary line.
pub fn to_csv(sv: &Semivariogram, fit: Option<&VariogramFit>) -> String {
    let mut out = String::from("bin_center,gamma,count\n");
    for i in 0..sv.gamma.len() {
        out.push_str(&format!("{},{},{}\n", sig9(sv.bin_centers[i]), sig9(sv.gamma[i]), sv.counts[i]));
    }
    if let Some(f) = fit {
        out.push_str(&format!(
            "# fit sill={} length={} nugget={} rmse={} boundary={} degenerate={}\n",
            sig9(f.sill),
            sig9(f.length),
            sig9(f.nugget),
            sig9(f.rmse),
            f.boundary,
            f.degenerate
        ));
    }
    out
}
