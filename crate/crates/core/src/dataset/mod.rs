//! Within-site residual datasets: frequency grids, recordings, loading and
//! synthetic generation.

mod io;
mod subset;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geo::{path_geometry, GeoPoint, LocalFrame, PathGeometry};
use crate::gp::kernel::{KernelPath, PathKey};
use crate::{Error, Result};

pub use io::{
    dataset_csv, frequencies_csv, load_dataset, parse_dataset, parse_frequencies, write_dataset, DATASET_FILE,
    FIXED_COLUMNS,
    FREQUENCY_FILE,
};
pub use subset::{kmeans_station_subset, StationSubset};
pub use synth::{sample_path_terms, synth_generate, SynthConfig, SyntheticTruth};

/// Magnitude bound on a residual before it is treated as corrupt.
pub const RESIDUAL_SANITY_BOUND: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Log,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    values: Vec<f64>,
    spacing: Spacing,
}

impl FrequencyGrid {
    pub fn new(values: Vec<f64>, spacing: Spacing) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("frequency grid is empty".into()));
        }
        if values.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::InvalidArgument("frequencies must be finite and positive".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("frequencies must be strictly increasing".into()));
        }
        Ok(Self { values, spacing })
    }

    pub fn from_spec(spec: &GridSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_freq;
        let values = (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                match spec.spacing {
                    Spacing::Log => (spec.f_min.ln() + t * (spec.f_max.ln() - spec.f_min.ln())).exp(),
                    Spacing::Linear => spec.f_min + t * (spec.f_max - spec.f_min),
                }
            })
            .collect();
        Self::new(values, spec.spacing)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the grid frequency closest to `hz` in log distance.
    pub fn nearest_index(&self, hz: f64) -> usize {
        let target = hz.ln();
        let mut best = (0, f64::INFINITY);
        for (i, f) in self.values.iter().enumerate() {
            let d = (f.ln() - target).abs();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Indices of the interior band that drops `edge_fraction` of the grid at
    /// each end.
    pub fn interior(&self, edge_fraction: f64) -> std::ops::Range<usize> {
        let n = self.values.len();
        let cut = (edge_fraction * n as f64).floor() as usize;
        cut.min(n / 2)..n - cut.min(n / 2)
    }
}

/// Working-grid request: `n_freq` points between `f_min` and `f_max` Hz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub n_freq: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub spacing: Spacing,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_freq: 128,
            f_min: 2.0,
            f_max: 15.0,
            spacing: Spacing::Log,
        }
    }
}

impl GridSpec {
    pub fn full_scale() -> Self {
        Self {
            n_freq: 911,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_freq < 8 {
            return Err(Error::InvalidArgument(format!(
                "working grid needs at least 8 frequencies, got {}",
                self.n_freq
            )));
        }
        if !(self.f_min > 0.0 && self.f_max > self.f_min && self.f_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid band [{}, {}] Hz",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }
}

/// Log-frequency distance under which a target point takes the source value
/// verbatim (absorbs round-off from frequencies written as text).
const SNAP: f64 = 1e-9;

/// Linear interpolation in log-frequency; constant extrapolation past the
/// ends of the source grid.
pub fn resample(src_freqs: &[f64], values: &[f64], target: &[f64]) -> Vec<f64> {
    assert_eq!(src_freqs.len(), values.len());
    let logs: Vec<f64> = src_freqs.iter().map(|f| f.ln()).collect();
    target
        .iter()
        .map(|&f| {
            let x = f.ln();
            match logs.partition_point(|&l| l < x) {
                0 => values[0],
                i if i == logs.len() && x - logs[i - 1] <= SNAP => values[i - 1],
                i if i == logs.len() => values[logs.len() - 1],
                i if logs[i] - x <= SNAP => values[i],
                i if x - logs[i - 1] <= SNAP => values[i - 1],
                i => {
                    let t = (x - logs[i - 1]) / (logs[i] - logs[i - 1]);
                    values[i - 1] + t * (values[i] - values[i - 1])
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub event_id: String,
    pub station_id: String,
    pub event: GeoPoint,
    pub station: GeoPoint,
    pub magnitude: f64,
    /// Within-site residual per working-grid frequency (ln units).
    pub dws: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Station {
    pub id: String,
    pub location: GeoPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub id: String,
    pub location: GeoPoint,
    pub magnitude: f64,
}

/// Recordings on a shared grid, sorted by `(event_id, station_id)`, with
/// unique event and station tables.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualDataset {
    pub grid: FrequencyGrid,
    pub recordings: Vec<Recording>,
    pub stations: Vec<Station>,
    pub events: Vec<Event>,
    pub frame: LocalFrame,
    keys: Vec<PathKey>,
}

impl ResidualDataset {
    /// Validates and indexes `recordings`; the frame is centred on the
    /// bounding box of every event and station.
    pub fn new(grid: FrequencyGrid, recordings: Vec<Recording>) -> Result<Self> {
        let frame = LocalFrame::centered_on(
            recordings.iter().flat_map(|r| [&r.event, &r.station]),
        );
        Self::with_frame(grid, recordings, frame)
    }

    pub fn with_frame(grid: FrequencyGrid, mut recordings: Vec<Recording>, frame: LocalFrame) -> Result<Self> {
        for (i, r) in recordings.iter().enumerate() {
            if r.dws.len() != grid.len() {
                return Err(Error::Data {
                    row: i + 1,
                    message: format!("{} residuals for a {}-point grid", r.dws.len(), grid.len()),
                });
            }
            if let Some(j) = r.dws.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data {
                    row: i + 1,
                    message: format!("non-finite residual at frequency index {j}"),
                });
            }
            if let Some(j) = r.dws.iter().position(|v| v.abs() >= RESIDUAL_SANITY_BOUND) {
                return Err(Error::Data {
                    row: i + 1,
                    message: format!("residual {} at index {j} exceeds sanity bound", r.dws[j]),
                });
            }
            r.event.validate()?;
            r.station.validate()?;
        }
        recordings.sort_by(|a, b| (&a.event_id, &a.station_id).cmp(&(&b.event_id, &b.station_id)));
        for (i, w) in recordings.windows(2).enumerate() {
            if w[0].event_id == w[1].event_id && w[0].station_id == w[1].station_id {
                return Err(Error::Duplicate {
                    event: w[1].event_id.clone(),
                    station: w[1].station_id.clone(),
                    row: i + 2,
                });
            }
        }
        let mut events: BTreeMap<&str, Event> = BTreeMap::new();
        let mut stations: BTreeMap<&str, Station> = BTreeMap::new();
        for r in &recordings {
            events.entry(&r.event_id).or_insert_with(|| Event {
                id: r.event_id.clone(),
                location: r.event,
                magnitude: r.magnitude,
            });
            stations.entry(&r.station_id).or_insert_with(|| Station {
                id: r.station_id.clone(),
                location: r.station,
            });
        }
        let events: Vec<Event> = events.into_values().collect();
        let stations: Vec<Station> = stations.into_values().collect();
        let keys = recordings
            .iter()
            .map(|r| PathKey {
                event: events.binary_search_by(|e| e.id.as_str().cmp(&r.event_id)).expect("event"),
                station: stations
                    .binary_search_by(|s| s.id.as_str().cmp(&r.station_id))
                    .expect("station"),
            })
            .collect();
        Ok(Self {
            grid,
            recordings,
            stations,
            events,
            frame,
            keys,
        })
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    pub fn n_freq(&self) -> usize {
        self.grid.len()
    }

    pub fn key(&self, i: usize) -> PathKey {
        self.keys[i]
    }

    pub fn keys(&self) -> &[PathKey] {
        &self.keys
    }

    pub fn geometry(&self, i: usize) -> Result<PathGeometry> {
        let r = &self.recordings[i];
        path_geometry(&self.frame, &r.event, &r.station)
    }

    /// Kernel paths for every recording, in recording order.
    pub fn kernel_paths(&self) -> Result<Vec<KernelPath>> {
        (0..self.len())
            .map(|i| Ok(KernelPath::observed(self.keys[i], self.geometry(i)?)))
            .collect()
    }

    /// Residuals at one frequency index across recordings.
    pub fn column(&self, freq_index: usize) -> Vec<f64> {
        self.recordings.iter().map(|r| r.dws[freq_index]).collect()
    }

    pub fn station_xy(&self) -> Vec<[f64; 2]> {
        self.stations.iter().map(|s| self.frame.project(&s.location)).collect()
    }

    /// Keeps recordings whose station id is in `ids` (sorted).
    pub fn restrict_to_stations(&self, ids: &[String]) -> Result<Self> {
        let recs = self
            .recordings
            .iter()
            .filter(|r| ids.binary_search(&r.station_id).is_ok())
            .cloned()
            .collect();
        Self::with_frame(self.grid.clone(), recs, self.frame)
    }

    /// Recordings whose event index satisfies `keep`.
    pub fn filter_events(&self, keep: impl Fn(usize) -> bool) -> Result<Self> {
        let recs = self
            .recordings
            .iter()
            .zip(&self.keys)
            .filter(|(_, k)| keep(k.event))
            .map(|(r, _)| r.clone())
            .collect();
        Self::with_frame(self.grid.clone(), recs, self.frame)
    }

    /// Same recordings and geometry with residuals replaced row by row.
    pub fn with_residuals(&self, dws: Vec<Vec<f64>>) -> Result<Self> {
        if dws.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} residual rows for {} recordings",
                dws.len(),
                self.len()
            )));
        }
        let recs = self
            .recordings
            .iter()
            .zip(dws)
            .map(|(r, d)| Recording { dws: d, ..r.clone() })
            .collect();
        Self::with_frame(self.grid.clone(), recs, self.frame)
    }
}
