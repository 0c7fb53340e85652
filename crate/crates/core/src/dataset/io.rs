//! CSV interchange: `dataset.csv` (one row per recording, wide frequency
//! columns) plus a `frequencies.csv` sidecar with one Hz value per line.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::{resample, FrequencyGrid, GridSpec, Recording, ResidualDataset, Spacing};
use crate::format::sig9;
use crate::geo::GeoPoint;
use crate::{Error, Result};

pub const DATASET_FILE: &str = "dataset.csv";
pub const FREQUENCY_FILE: &str = "frequencies.csv";

pub const FIXED_COLUMNS: [&str; 8] = [
    "event_id",
    "station_id",
    "event_lat",
    "event_lon",
    "event_depth_km",
    "station_lat",
    "station_lon",
    "magnitude",
];

/// One frequency per non-empty line; `#` starts a comment.
pub fn parse_frequencies(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: f64 = line.parse().map_err(|_| Error::Data {
            row: i + 1,
            message: format!("frequency `{line}` is not a number"),
        })?;
        if !f.is_finite() || f <= 0.0 {
            return Err(Error::Data {
                row: i + 1,
                message: format!("frequency {f} must be positive"),
            });
        }
        if out.last().is_some_and(|&prev| f <= prev) {
            return Err(Error::Data {
                row: i + 1,
                message: "frequencies must be strictly increasing".into(),
            });
        }
        out.push(f);
    }
    if out.is_empty() {
        return Err(Error::Schema("frequency file lists no frequencies".into()));
    }
    Ok(out)
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, row: usize) -> Result<&'a str> {
    let v = rec.get(idx).map(str::trim).unwrap_or("");
    if v.is_empty() {
        return Err(Error::Data {
            row,
            message: format!("missing `{}`", FIXED_COLUMNS.get(idx).copied().unwrap_or("residual")),
        });
    }
    Ok(v)
}

fn number(rec: &csv::StringRecord, idx: usize, row: usize) -> Result<f64> {
    let v = field(rec, idx, row)?;
    v.parse::<f64>().map_err(|_| Error::Data {
        row,
        message: format!("`{}` = `{v}` is not a number", FIXED_COLUMNS.get(idx).copied().unwrap_or("residual")),
    })
}

/// Parses dataset CSV text whose residual columns align with `src_freqs`,
/// resampling onto `grid` (or keeping `src_freqs` when `grid` is `None`).
pub fn parse_dataset<R: Read>(reader: R, src_freqs: &[f64], grid: Option<&GridSpec>) -> Result<ResidualDataset> {
    let target = match grid {
        Some(spec) => FrequencyGrid::from_spec(spec)?,
        None => FrequencyGrid::new(src_freqs.to_vec(), Spacing::Log)?,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .clone();
    if header.len() < FIXED_COLUMNS.len() {
        return Err(Error::Schema(format!(
            "header has {} columns, expected at least {}",
            header.len(),
            FIXED_COLUMNS.len()
        )));
    }
    for (i, want) in FIXED_COLUMNS.iter().enumerate() {
        if header[i].trim() != *want {
            return Err(Error::Schema(format!(
                "column {} is `{}`, expected `{want}`",
                i + 1,
                &header[i]
            )));
        }
    }
    let n_res = header.len() - FIXED_COLUMNS.len();
    if n_res != src_freqs.len() {
        return Err(Error::Schema(format!(
            "{n_res} residual columns but {} frequencies in the sidecar",
            src_freqs.len()
        )));
    }
    if let Some(bad) = header.iter().skip(FIXED_COLUMNS.len()).find(|h| !h.trim().starts_with("dws_")) {
        return Err(Error::Schema(format!("residual column `{bad}` must start with `dws_`")));
    }

    let mut recordings = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut row = 0;
    loop {
        row += 1;
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(Error::Data { row, message: e.to_string() }),
        }
        if record.len() != header.len() {
            return Err(Error::Data {
                row,
                message: format!("{} fields, header has {}", record.len(), header.len()),
            });
        }
        let event_id = field(&record, 0, row)?.to_string();
        let station_id = field(&record, 1, row)?.to_string();
        let geo = |r: Result<GeoPoint>| {
            r.map_err(|e| Error::Data {
                row,
                message: e.to_string(),
            })
        };
        let event = geo(GeoPoint::new(
            number(&record, 2, row)?,
            number(&record, 3, row)?,
            number(&record, 4, row)?,
        ))?;
        let station = geo(GeoPoint::surface(number(&record, 5, row)?, number(&record, 6, row)?))?;
        let magnitude = number(&record, 7, row)?;
        if !magnitude.is_finite() {
            return Err(Error::Data {
                row,
                message: "non-finite magnitude".into(),
            });
        }
        let mut raw = Vec::with_capacity(n_res);
        for j in 0..n_res {
            let v = number(&record, FIXED_COLUMNS.len() + j, row)?;
            if !v.is_finite() {
                return Err(Error::Data {
                    row,
                    message: format!("non-finite residual in `{}`", &header[FIXED_COLUMNS.len() + j]),
                });
            }
            raw.push(v);
        }
        recordings.push(Recording {
            event_id,
            station_id,
            event,
            station,
            magnitude,
            dws: resample(src_freqs, &raw, target.values()),
        });
    }
    ResidualDataset::new(target, recordings).map_err(|e| match e {
        // Row numbers from validation refer to sorted order; keep the message.
        Error::Data { message, .. } => Error::Data { row: 0, message },
        other => other,
    })
}

/// Loads `<dir>/dataset.csv` with `<dir>/frequencies.csv`, or a dataset file
/// path whose sidecar sits next to it.
pub fn load_dataset(path: &Path, grid: Option<&GridSpec>) -> Result<ResidualDataset> {
    let (data_path, freq_path) = if path.is_dir() {
        (path.join(DATASET_FILE), path.join(FREQUENCY_FILE))
    } else {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        (path.to_path_buf(), dir.join(FREQUENCY_FILE))
    };
    let freq_text = fs::read_to_string(&freq_path).map_err(|e| Error::io(&freq_path, e))?;
    let freqs = parse_frequencies(&freq_text)?;
    let file = fs::File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
    parse_dataset(std::io::BufReader::new(file), &freqs, grid)
}

pub fn dataset_csv(ds: &ResidualDataset) -> String {
    let mut out = String::new();
    out.push_str(&FIXED_COLUMNS.join(","));
    for i in 0..ds.n_freq() {
        out.push_str(&format!(",dws_f{}", i + 1));
    }
    out.push('\n');
    for r in &ds.recordings {
        let fixed = [
            r.event_id.clone(),
            r.station_id.clone(),
            sig9(r.event.lat),
            sig9(r.event.lon),
            sig9(r.event.depth),
            sig9(r.station.lat),
            sig9(r.station.lon),
            sig9(r.magnitude),
        ];
        out.push_str(&fixed.join(","));
        for v in &r.dws {
            out.push(',');
            out.push_str(&sig9(*v));
        }
        out.push('\n');
    }
    out
}

pub fn frequencies_csv(grid: &FrequencyGrid) -> String {
    grid.values().iter().map(|f| sig9(*f) + "\n").collect()
}

/// Writes `dataset.csv` and `frequencies.csv` into `dir`.
pub fn write_dataset(ds: &ResidualDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(DATASET_FILE);
    fs::write(&p, dataset_csv(ds)).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(FREQUENCY_FILE);
    fs::write(&p, frequencies_csv(&ds.grid)).map_err(|e| Error::io(&p, e))?;
    Ok(())
}
