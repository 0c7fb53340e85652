//! Station subsets for the density experiment: k-means on station
//! coordinates, keeping the station nearest each centroid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ResidualDataset;
use crate::{Error, Result};

const MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct StationSubset {
    /// Sorted station ids.
    pub station_ids: Vec<String>,
    pub k: usize,
    /// Set when the dataset had no more than `k` stations and all are kept.
    pub saturated: bool,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: [f64; 2], centers: &[[f64; 2]]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dist2(p, *c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Lloyd iterations from k-means++ seeding; returns the centroids.
pub fn kmeans(points: &[[f64; 2]], k: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)]];
    while centers.len() < k {
        let w: Vec<f64> = points.iter().map(|p| nearest(*p, &centers).1).collect();
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.gen_range(0.0..total);
        let mut pick = n - 1;
        for (i, wi) in w.iter().enumerate() {
            if r < *wi {
                pick = i;
                break;
            }
            r -= wi;
        }
        centers.push(points[pick]);
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let c = nearest(*p, &centers).0;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; centers.len()];
        for (a, p) in assign.iter().zip(points) {
            sums[*a][0] += p[0];
            sums[*a][1] += p[1];
            sums[*a][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    centers
}

/// `k = max(1, floor(area / separation²))` over the station bounding box. A
/// separation of 0 keeps every station.
pub fn kmeans_station_subset(ds: &ResidualDataset, min_separation_km: f64, seed: u64) -> Result<StationSubset> {
    if !(min_separation_km.is_finite() && min_separation_km >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "separation must be non-negative, got {min_separation_km}"
        )));
    }
    let xy = ds.station_xy();
    let all: Vec<String> = ds.stations.iter().map(|s| s.id.clone()).collect();
    if xy.is_empty() {
        return Err(Error::InvalidArgument("dataset has no stations".into()));
    }
    if min_separation_km == 0.0 {
        return Ok(StationSubset {
            k: all.len(),
            station_ids: all,
            saturated: true,
        });
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &xy {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let k = ((area / (min_separation_km * min_separation_km)).floor() as usize).max(1);
    if k >= xy.len() {
        return Ok(StationSubset {
            station_ids: all,
            k,
            saturated: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans(&xy, k, &mut rng);
    let mut picked: Vec<usize> = centers
        .iter()
        .map(|c| nearest(*c, &xy).0)
        .collect();
    picked.sort_unstable();
    picked.dedup();
    Ok(StationSubset {
        station_ids: picked.into_iter().map(|i| all[i].clone()).collect(),
        k,
        saturated: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, GridSpec, SynthConfig};

    fn dataset() -> ResidualDataset {
        let cfg = SynthConfig {
            n_stations: 120,
            n_events: 4,
            stations_per_event: 120,
            grid: GridSpec {
                n_freq: 8,
                ..GridSpec::default()
            },
            ..SynthConfig::default()
        };
        synth_generate(&cfg, 11).unwrap().0
    }

    #[test]
    fn huge_separation_keeps_one_station() {
        let s = kmeans_station_subset(&dataset(), 1000.0, 1).unwrap();
        assert_eq!(s.station_ids.len(), 1);
        assert!(!s.saturated);
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let ds = dataset();
        let a = kmeans_station_subset(&ds, 20.0, 1).unwrap();
        let b = kmeans_station_subset(&ds, 20.0, 1).unwrap();
        let c = kmeans_station_subset(&ds, 20.0, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.station_ids, c.station_ids);
        assert!(a.k > 1 && a.station_ids.len() <= a.k);
    }

    #[test]
    fn small_separation_saturates() {
        let ds = dataset();
        let s = kmeans_station_subset(&ds, 1.0, 1).unwrap();
        assert!(s.saturated);
        assert_eq!(s.station_ids.len(), ds.stations.len());
        assert!(kmeans_station_subset(&ds, -1.0, 1).is_err());
    }
}
