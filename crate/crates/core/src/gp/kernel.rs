//! Composite path covariance and matrix assembly.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geo::{path_deltas, PathGeometry};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparameters {
    /// Standard deviation of the spatially correlated path term (ln units).
    pub phi_p2p: f64,
    /// Standard deviation of the within-path residual (ln units).
    pub phi_sp_ne: f64,
    /// Correlation length in rupture-distance difference, km.
    pub rho_r: f64,
    /// Correlation length in azimuth difference, degrees.
    pub rho_az: f64,
    /// Correlation length in site separation, km.
    pub rho_s: f64,
}

impl GpHyperparameters {
    pub fn new(lengths: CorrelationLengths, phi_p2p: f64, phi_sp_ne: f64) -> Self {
        Self {
            phi_p2p,
            phi_sp_ne,
            rho_r: lengths.rho_r,
            rho_az: lengths.rho_az,
            rho_s: lengths.rho_s,
        }
    }

    pub fn lengths(&self) -> CorrelationLengths {
        CorrelationLengths {
            rho_r: self.rho_r,
            rho_az: self.rho_az,
            rho_s: self.rho_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.phi_p2p, self.phi_sp_ne, self.rho_r, self.rho_az, self.rho_s];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "GP hyperparameters must be finite and positive: {self:?}"
            )));
        }
        if self.phi_sp_ne > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "phi_sp_ne = {} exceeds 1.0 ln units",
                self.phi_sp_ne
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationLengths {
    pub rho_r: f64,
    pub rho_az: f64,
    pub rho_s: f64,
}

/// Identity of an observed path: indices into the dataset event and station
/// tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathKey {
    pub event: usize,
    pub station: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelPath {
    /// `None` for prediction paths that match no observation.
    pub key: Option<PathKey>,
    pub geom: PathGeometry,
}

impl KernelPath {
    pub fn observed(key: PathKey, geom: PathGeometry) -> Self {
        Self { key: Some(key), geom }
    }

    pub fn target(geom: PathGeometry) -> Self {
        Self { key: None, geom }
    }

    pub fn same_path(&self, other: &KernelPath) -> bool {
        matches!((self.key, other.key), (Some(a), Some(b)) if a == b)
    }
}

/// Spatially correlated part of the kernel (no nugget).
pub fn smooth_covariance(a: &PathGeometry, b: &PathGeometry, theta: &GpHyperparameters) -> f64 {
    let d = path_deltas(a, b);
    let q = d.d_r * d.d_r / (2.0 * theta.rho_r * theta.rho_r)
        + d.d_az * d.d_az / (2.0 * theta.rho_az * theta.rho_az)
        + d.d_ss * d.d_ss / (2.0 * theta.rho_s * theta.rho_s);
    theta.phi_p2p * theta.phi_p2p * (-q).exp()
}

pub fn path_covariance(
    a: &PathGeometry,
    b: &PathGeometry,
    theta: &GpHyperparameters,
    same_path: bool,
) -> f64 {
    let nugget = if same_path {
        theta.phi_sp_ne * theta.phi_sp_ne
    } else {
        0.0
    };
    smooth_covariance(a, b, theta) + nugget
}

/// `K[i, j] = k(a_i, b_j)`; the nugget enters only for matching observation
/// keys and only when `include_nugget` is set.
pub fn build_covariance(
    a: &[KernelPath],
    b: &[KernelPath],
    theta: &GpHyperparameters,
    include_nugget: bool,
) -> DMatrix<f64> {
    let (n, m) = (a.len(), b.len());
    let mut data = vec![0.0; n * m];
    // Column-major: column j holds k(a_·, b_j).
    data.par_chunks_mut(n.max(1)).zip(b.par_iter()).for_each(|(col, bj)| {
        for (slot, ai) in col.iter_mut().zip(a) {
            let same = include_nugget && ai.same_path(bj);
            *slot = path_covariance(&ai.geom, &bj.geom, theta, same);
        }
    });
    DMatrix::from_vec(n, m, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::path_deltas;
    use crate::linalg::min_eigenvalue;
    use proptest::prelude::*;

    fn theta() -> GpHyperparameters {
        GpHyperparameters {
            phi_p2p: 0.3,
            phi_sp_ne: 0.4,
            rho_r: 30.0,
            rho_az: 25.0,
            rho_s: 15.0,
        }
    }

    fn geom(e: [f64; 2], d: f64, s: [f64; 2]) -> PathGeometry {
        PathGeometry::from_xy(e, d, s).unwrap()
    }

    #[test]
    fn identical_path_total_variance() {
        let g = geom([0.0, 0.0], 8.0, [10.0, 5.0]);
        assert!((path_covariance(&g, &g, &theta(), true) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn one_length_in_distance() {
        // Both stations due north, r_rup differs by exactly rho_r.
        let a = geom([0.0, 0.0], 0.0, [0.0, 10.0]);
        let b = geom([0.0, -30.0], 0.0, [0.0, 10.0]);
        let d = path_deltas(&a, &b);
        assert!((d.d_r - 30.0).abs() < 1e-12 && d.d_az == 0.0 && d.d_ss == 0.0);
        let k = path_covariance(&a, &b, &theta(), false);
        assert!((k - 0.09 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_kernel_is_scaled_identity() {
        let paths: Vec<KernelPath> = (0..4)
            .map(|i| {
                KernelPath::observed(
                    PathKey { event: i, station: i },
                    geom([0.0, 0.0], 5.0, [i as f64, 2.0 * i as f64]),
                )
            })
            .collect();
        let t = GpHyperparameters { phi_p2p: 0.0, ..theta() };
        let k = build_covariance(&paths, &paths, &t, true);
        assert!((k - DMatrix::identity(4, 4) * 0.16).abs().max() < 1e-15);
    }

    fn random_paths(seed: u64, n: usize) -> Vec<KernelPath> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let g = geom(
                    [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)],
                    rng.gen_range(2.0..15.0),
                    [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)],
                );
                KernelPath::observed(PathKey { event: i, station: 0 }, g)
            })
            .collect()
    }

    #[test]
    fn matrix_matches_brute_force() {
        let p = random_paths(3, 3);
        let k = build_covariance(&p, &p, &theta(), true);
        for i in 0..3 {
            for j in 0..3 {
                let d = path_deltas(&p[i].geom, &p[j].geom);
                let t = theta();
                let oracle = t.phi_p2p.powi(2)
                    * (-d.d_r.powi(2) / (2.0 * t.rho_r.powi(2))).exp()
                    * (-d.d_az.powi(2) / (2.0 * t.rho_az.powi(2))).exp()
                    * (-d.d_ss.powi(2) / (2.0 * t.rho_s.powi(2))).exp()
                    + if i == j { t.phi_sp_ne.powi(2) } else { 0.0 };
                assert!((k[(i, j)] - oracle).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nugget_bounds_min_eigenvalue() {
        let p = random_paths(9, 40);
        let k = build_covariance(&p, &p, &theta(), true);
        assert!((k.clone() - k.transpose()).abs().max() == 0.0);
        assert!(min_eigenvalue(&k) >= 0.16 - 1e-10);
        let smooth = build_covariance(&p, &p, &theta(), false);
        assert!(min_eigenvalue(&smooth) >= -1e-10);
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(theta().validate().is_ok());
        assert!(GpHyperparameters { rho_s: 0.0, ..theta() }.validate().is_err());
        assert!(GpHyperparameters { phi_sp_ne: 1.5, ..theta() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn invariant_to_rigid_motion(seed in 0u64..500, angle in 0.0..std::f64::consts::TAU, tx in -50.0..50.0f64, ty in -50.0..50.0f64) {
            let p = random_paths(seed, 2);
            let (c, s) = (angle.cos(), angle.sin());
            let mv = |v: [f64; 2]| [c * v[0] - s * v[1] + tx, s * v[0] + c * v[1] + ty];
            let moved: Vec<PathGeometry> = p
                .iter()
                .map(|k| geom(mv(k.geom.event_xy), k.geom.event_depth, mv(k.geom.station_xy)))
                .collect();
            let a = smooth_covariance(&p[0].geom, &p[1].geom, &theta());
            let b = smooth_covariance(&moved[0], &moved[1], &theta());
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
