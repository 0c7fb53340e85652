//! Synthetic residual datasets with a known path-term field.
//!
//! Path terms are a draw from a zero-mean Gaussian field whose covariance is
//! the smooth path kernel in space times a squared-exponential kernel in
//! log2-frequency, so `truth = phi_p2p * L_s Z L_f^T` with `Z` standard normal.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FrequencyGrid, GridSpec, Recording, ResidualDataset};
use crate::geo::{GeoPoint, LocalFrame, PathGeometry};
use crate::gp::kernel::{smooth_covariance, CorrelationLengths, GpHyperparameters};
use crate::linalg::{cholesky_with_jitter, JITTER_LADDER};
use crate::format::sig9;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_stations: usize,
    pub n_events: usize,
    /// Stations recording each event, drawn without replacement.
    pub stations_per_event: usize,
    /// Events sharing each hypocentre (repeaters); 1 gives distinct sources.
    pub events_per_location: usize,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub depth_min_km: f64,
    pub depth_max_km: f64,
    pub magnitude_min: f64,
    pub magnitude_max: f64,
    pub phi_p2p: f64,
    pub phi_sp_ne: f64,
    pub rho_r_km: f64,
    pub rho_az_deg: f64,
    pub rho_s_km: f64,
    /// Squared-exponential length of the path-term interfrequency kernel, in
    /// octaves.
    pub freq_corr_octaves: f64,
    /// Same for the observation noise; 0 draws noise independently per
    /// frequency.
    pub noise_freq_corr_octaves: f64,
    pub grid: GridSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_stations: 150,
            n_events: 40,
            stations_per_event: 30,
            events_per_location: 1,
            lat_min: 37.3,
            lat_max: 38.2,
            lon_min: -122.6,
            lon_max: -121.6,
            depth_min_km: 3.0,
            depth_max_km: 15.0,
            magnitude_min: 2.5,
            magnitude_max: 4.5,
            phi_p2p: 0.5,
            phi_sp_ne: 0.4,
            rho_r_km: 30.0,
            rho_az_deg: 25.0,
            rho_s_km: 15.0,
            freq_corr_octaves: 1.0,
            noise_freq_corr_octaves: 0.0,
            grid: GridSpec::default(),
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth config serializes")
    }

    pub fn lengths(&self) -> CorrelationLengths {
        CorrelationLengths {
            rho_r: self.rho_r_km,
            rho_az: self.rho_az_deg,
            rho_s: self.rho_s_km,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_events > 0 && self.n_stations == 0 {
            return bad("events need at least one station".into());
        }
        if self.n_events > 0 && !(1..=self.n_stations).contains(&self.stations_per_event) {
            return bad(format!(
                "stations_per_event must lie in 1..={}, got {}",
                self.n_stations, self.stations_per_event
            ));
        }
        if self.events_per_location == 0 {
            return bad("events_per_location must be at least 1".into());
        }
        if !(self.lat_min < self.lat_max && self.lon_min < self.lon_max) {
            return bad("empty domain box".into());
        }
        if GeoPoint::surface(self.lat_min, self.lon_min).is_err()
            || GeoPoint::surface(self.lat_max, self.lon_max).is_err()
        {
            return bad("domain box outside valid coordinates".into());
        }
        if !(0.0 <= self.depth_min_km && self.depth_min_km <= self.depth_max_km) {
            return bad("need 0 <= depth_min_km <= depth_max_km".into());
        }
        if self.magnitude_min > self.magnitude_max {
            return bad("magnitude_min exceeds magnitude_max".into());
        }
        let nonneg = [
            ("phi_p2p", self.phi_p2p),
            ("phi_sp_ne", self.phi_sp_ne),
            ("freq_corr_octaves", self.freq_corr_octaves),
            ("noise_freq_corr_octaves", self.noise_freq_corr_octaves),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        for (name, v) in [
            ("rho_r_km", self.rho_r_km),
            ("rho_az_deg", self.rho_az_deg),
            ("rho_s_km", self.rho_s_km),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        self.grid.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    /// Generator hyperparameters, one entry per grid frequency.
    pub gp_params: Vec<GpHyperparameters>,
    pub freq_corr_length: f64,
    /// `[recording][frequency]`, aligned with the dataset's recording order.
    pub true_path_terms: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SyntheticTruth {
    /// `event_id,station_id,p2p_f1..p2p_fN`, one row per recording of `ds`.
    pub fn path_terms_csv(&self, ds: &ResidualDataset) -> String {
        let mut out = String::from("event_id,station_id");
        for i in 0..ds.n_freq() {
            out.push_str(&format!(",p2p_f{}", i + 1));
        }
        out.push('\n');
        for (r, row) in ds.recordings.iter().zip(&self.true_path_terms) {
            out.push_str(&r.event_id);
            out.push(',');
            out.push_str(&r.station_id);
            for v in row {
                out.push(',');
                out.push_str(&sig9(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Seed, interfrequency length and per-frequency generator parameters.
    pub fn summary_toml(&self, freqs: &[f64]) -> String {
        let mut out = format!("seed = \"{}\"\nfreq_corr_octaves = {}\n", self.seed, sig9(self.freq_corr_length));
        for (f, p) in freqs.iter().zip(&self.gp_params) {
            out.push_str(&format!(
                "\n[[frequency]]\nfreq_hz = {}\nphi_p2p = {}\nphi_sp_ne = {}\nrho_r = {}\nrho_az = {}\nrho_s = {}\n",
                sig9(*f),
                sig9(p.phi_p2p),
                sig9(p.phi_sp_ne),
                sig9(p.rho_r),
                sig9(p.rho_az),
                sig9(p.rho_s)
            ));
        }
        out
    }
}

/// Lower Cholesky factor of the squared-exponential kernel over log2 of the
/// grid frequencies; a zero length gives the identity.
fn frequency_factor(grid: &FrequencyGrid, octaves: f64) -> Result<DMatrix<f64>> {
    let n = grid.len();
    if octaves == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let l2: Vec<f64> = grid.values().iter().map(|f| f.log2()).collect();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let d = l2[i] - l2[j];
        (-d * d / (2.0 * octaves * octaves)).exp()
    });
    Ok(cholesky_with_jitter(&k, &JITTER_LADDER)?.lower())
}

/// Draws `phi * L_s Z L_f^T` for the given paths. Geometrically identical
/// paths share one row of the draw.
pub fn sample_path_terms(
    paths: &[PathGeometry],
    lengths: CorrelationLengths,
    phi_p2p: f64,
    grid: &FrequencyGrid,
    freq_corr_octaves: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut unique: BTreeMap<[u64; 5], usize> = BTreeMap::new();
    let mut reps: Vec<PathGeometry> = Vec::new();
    let slot: Vec<usize> = paths
        .iter()
        .map(|g| {
            let key = [
                g.event_xy[0].to_bits(),
                g.event_xy[1].to_bits(),
                g.event_depth.to_bits(),
                g.station_xy[0].to_bits(),
                g.station_xy[1].to_bits(),
            ];
            *unique.entry(key).or_insert_with(|| {
                reps.push(*g);
                reps.len() - 1
            })
        })
        .collect();
    let (np, nf) = (reps.len(), grid.len());
    let unit = GpHyperparameters::new(lengths, 1.0, 0.0);
    let ks = DMatrix::from_fn(np, np, |i, j| smooth_covariance(&reps[i], &reps[j], &unit));
    let ls = if np == 0 {
        ks
    } else {
        cholesky_with_jitter(&ks, &JITTER_LADDER)?.lower()
    };
    let lf = frequency_factor(grid, freq_corr_octaves)?;
    let z = DMatrix::from_fn(np, nf, |_, _| rng.sample::<f64, _>(StandardNormal));
    let field = (ls * z * lf.transpose()) * phi_p2p;
    Ok(slot
        .iter()
        .map(|&s| field.row(s).iter().copied().collect())
        .collect())
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Generates a dataset and its truth; identical `(config, seed)` give
/// identical output.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<(ResidualDataset, SyntheticTruth)> {
    config.validate()?;
    let grid = FrequencyGrid::from_spec(&config.grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config;

    let stations: Vec<GeoPoint> = (0..c.n_stations)
        .map(|_| {
            let lat = uniform(&mut rng, c.lat_min, c.lat_max);
            let lon = uniform(&mut rng, c.lon_min, c.lon_max);
            GeoPoint::surface(lat, lon)
        })
        .collect::<Result<_>>()?;
    let mut events: Vec<(GeoPoint, f64)> = Vec::with_capacity(c.n_events);
    while events.len() < c.n_events {
        let lat = uniform(&mut rng, c.lat_min, c.lat_max);
        let lon = uniform(&mut rng, c.lon_min, c.lon_max);
        let depth = uniform(&mut rng, c.depth_min_km, c.depth_max_km);
        let loc = GeoPoint::new(lat, lon, depth)?;
        for _ in 0..c.events_per_location {
            if events.len() < c.n_events {
                let mag = uniform(&mut rng, c.magnitude_min, c.magnitude_max);
                events.push((loc, mag));
            }
        }
    }
    let ev_width = c.n_events.max(1).to_string().len().max(4);
    let st_width = c.n_stations.max(1).to_string().len().max(4);

    let mut recordings = Vec::new();
    for (e, (loc, mag)) in events.iter().enumerate() {
        let mut picked = index::sample(&mut rng, c.n_stations, c.stations_per_event).into_vec();
        picked.sort_unstable();
        for s in picked {
            recordings.push(Recording {
                event_id: format!("E{:0ev_width$}", e + 1),
                station_id: format!("S{:0st_width$}", s + 1),
                event: *loc,
                station: stations[s],
                magnitude: *mag,
                dws: Vec::new(),
            });
        }
    }
    // Ids are zero-padded so generation order is already the sorted order.
    let frame = LocalFrame::new(GeoPoint::surface(
        0.5 * (c.lat_min + c.lat_max),
        0.5 * (c.lon_min + c.lon_max),
    )?);
    let geoms: Vec<PathGeometry> = recordings
        .iter()
        .map(|r| crate::geo::path_geometry(&frame, &r.event, &r.station))
        .collect::<Result<_>>()?;

    let truth = sample_path_terms(&geoms, c.lengths(), c.phi_p2p, &grid, c.freq_corr_octaves, &mut rng)?;
    let lnoise = frequency_factor(&grid, c.noise_freq_corr_octaves)?;
    let nf = grid.len();
    for (r, t) in recordings.iter_mut().zip(&truth) {
        let eps: Vec<f64> = (0..nf).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        r.dws = (0..nf)
            .map(|i| {
                let n: f64 = (0..=i).map(|j| lnoise[(i, j)] * eps[j]).sum();
                t[i] + c.phi_sp_ne * n
            })
            .collect();
    }
    let dataset = ResidualDataset::with_frame(grid, recordings, frame)?;
    let theta = GpHyperparameters::new(c.lengths(), c.phi_p2p, c.phi_sp_ne);
    let truth = SyntheticTruth {
        gp_params: vec![theta; nf],
        freq_corr_length: c.freq_corr_octaves,
        true_path_terms: truth,
        seed,
    };
    Ok((dataset, truth))
}
