//! GP exactness, a dense brute-force oracle, and hyperparameter recovery.

use std::time::Instant;

use fasgen_core::dataset::{synth_generate, SynthConfig};
use fasgen_core::geo::PathGeometry;
use fasgen_core::gp::{fit_variances, log_likelihood, predict, GpFit, GpHyperparameters, KernelPath, PathKey};
use fasgen_core::variogram::{estimate_path_lengths, VariogramConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::support::Verdict;

fn random_geometry(rng: &mut ChaCha8Rng) -> PathGeometry {
    let e = [rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0)];
    let s = [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)];
    PathGeometry::from_xy(e, rng.gen_range(3.0..15.0), s).expect("non-degenerate path")
}

fn observed(geoms: &[PathGeometry]) -> Vec<KernelPath> {
    geoms
        .iter()
        .enumerate()
        .map(|(i, g)| KernelPath::observed(PathKey { event: i, station: i }, *g))
        .collect()
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn exactness(_: &mut crate::support::Shared) -> Result<Verdict, String> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let theta = GpHyperparameters {
        phi_p2p: 0.5,
        phi_sp_ne: 1e-7,
        rho_r: 30.0,
        rho_az: 25.0,
        rho_s: 15.0,
    };
    let (mut worst_mean, mut worst_sd) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let geoms: Vec<PathGeometry> = (0..12).map(|_| random_geometry(&mut rng)).collect();
        let obs = randn(&mut rng, geoms.len(), 0.5);
        let fit = GpFit::new(observed(&geoms), &[10.0], &[obs.clone()], &[theta]).map_err(|e| e.to_string())?;
        let targets: Vec<KernelPath> = geoms.iter().map(|g| KernelPath::target(*g)).collect();
        let p = predict(&fit, 0, &targets).map_err(|e| e.to_string())?;
        for ((m, sd), y) in p.mean.iter().zip(&p.epistemic_sd).zip(&obs) {
            worst_mean = worst_mean.max((m - y).abs());
            worst_sd = worst_sd.max(*sd);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let sd_bound = 1e-4 * theta.phi_p2p;
    Ok(Verdict::new(
        worst_mean <= 1e-8 && worst_sd <= sd_bound && secs < 1.0,
        format!(
            "max |mean - obs| = {worst_mean:.2e} (<= 1e-8), max sd = {worst_sd:.2e} (<= {sd_bound:.0e}), {secs:.3} s (< 1 s)"
        ),
    ))
}

/// Kernel and posterior written out directly: explicit covariance entries,
/// a general inverse and a determinant.
struct Dense {
    k: DMatrix<f64>,
    inv: DMatrix<f64>,
}

fn oracle_cov(a: &PathGeometry, b: &PathGeometry, t: &GpHyperparameters) -> f64 {
    let dr = a.r_rup - b.r_rup;
    let mut daz = (a.azimuth - b.azimuth).abs();
    if daz > 180.0 {
        daz = 360.0 - daz;
    }
    let dx = a.station_xy[0] - b.station_xy[0];
    let dy = a.station_xy[1] - b.station_xy[1];
    let dss2 = dx * dx + dy * dy;
    t.phi_p2p.powi(2)
        * (-dr * dr / (2.0 * t.rho_r.powi(2)) - daz * daz / (2.0 * t.rho_az.powi(2)) - dss2 / (2.0 * t.rho_s.powi(2))).exp()
}

impl Dense {
    fn new(obs: &[PathGeometry], t: &GpHyperparameters) -> Option<Self> {
        let n = obs.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            oracle_cov(&obs[i], &obs[j], t) + if i == j { t.phi_sp_ne.powi(2) } else { 0.0 }
        });
        let inv = k.clone().try_inverse()?;
        Some(Self { k, inv })
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-12)
}

pub fn oracle_equivalence(_: &mut crate::support::Shared) -> Result<Verdict, String> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for _ in 0..10 {
        let n = rng.gen_range(1..=8);
        let theta = GpHyperparameters {
            phi_p2p: rng.gen_range(0.2..0.8),
            phi_sp_ne: rng.gen_range(0.2..0.6),
            rho_r: rng.gen_range(10.0..50.0),
            rho_az: rng.gen_range(10.0..60.0),
            rho_s: rng.gen_range(5.0..30.0),
        };
        let geoms: Vec<PathGeometry> = (0..n).map(|_| random_geometry(&mut rng)).collect();
        let targets: Vec<PathGeometry> = (0..5).map(|_| random_geometry(&mut rng)).collect();
        let y = randn(&mut rng, n, 0.6);
        let dense = Dense::new(&geoms, &theta).ok_or("oracle covariance is singular")?;
        let yv = DVector::from_column_slice(&y);

        let paths = observed(&geoms);
        let fit = GpFit::new(paths.clone(), &[5.0], &[y.clone()], &[theta]).map_err(|e| e.to_string())?;
        let tp: Vec<KernelPath> = targets.iter().map(|g| KernelPath::target(*g)).collect();
        let p = predict(&fit, 0, &tp).map_err(|e| e.to_string())?;
        for (i, tg) in targets.iter().enumerate() {
            let k = DVector::from_fn(n, |j, _| oracle_cov(&geoms[j], tg, &theta));
            let mean = (k.transpose() * &dense.inv * &yv)[0];
            let var = theta.phi_p2p.powi(2) - (k.transpose() * &dense.inv * &k)[0];
            let sd = var.max(0.0).sqrt();
            for (got, want) in [(p.mean[i], mean), (p.epistemic_sd[i], sd)] {
                worst = worst.max((got - want).abs() / want.abs().max(1e-12));
                checked += 1;
                if !rel_close(got, want, 1e-8) {
                    return Ok(Verdict::fail(format!("predict {got} vs oracle {want} (n_obs = {n})")));
                }
            }
        }

        let ll = log_likelihood(&y, &paths, &theta).map_err(|e| e.to_string())?;
        let quad = (yv.transpose() * &dense.inv * &yv)[0];
        let want = -0.5 * quad - 0.5 * dense.k.determinant().ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        worst = worst.max((ll - want).abs() / want.abs());
        checked += 1;
        if !rel_close(ll, want, 1e-8) {
            return Ok(Verdict::fail(format!("log likelihood {ll} vs oracle {want} (n_obs = {n})")));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Verdict::new(
        secs < 10.0,
        format!("{checked} quantities on 10 instances, worst relative error {worst:.2e} (<= 1e-8), {secs:.2} s (< 10 s)"),
    ))
}

pub fn hyperparameter_recovery(_: &mut crate::support::Shared) -> Result<Verdict, String> {
    let t = Instant::now();
    let (p2p, sp, rho_s) = (0.5, 0.4, 15.0);
    let cfg = SynthConfig {
        n_stations: 100,
        n_events: 25,
        stations_per_event: 20,
        phi_p2p: p2p,
        phi_sp_ne: sp,
        rho_s_km: rho_s,
        ..SynthConfig::default()
    };
    let within = |got: f64, want: f64, tol: f64| (got / want - 1.0).abs() <= tol;
    let (mut var_ok, mut len_ok) = (0, 0);
    let mut rows = Vec::new();
    let mut lengths = Vec::new();
    for seed in 0..10 {
        let (ds, _) = synth_generate(&cfg, seed).map_err(|e| e.to_string())?;
        let f = ds.grid.nearest_index(10.0);
        let paths = ds.kernel_paths().map_err(|e| e.to_string())?;
        let v = fit_variances(&ds.column(f), &paths, cfg.lengths()).map_err(|e| e.to_string())?;
        let l = estimate_path_lengths(&ds, f, &VariogramConfig::default()).map_err(|e| e.to_string())?;
        var_ok += usize::from(within(v.phi_p2p, p2p, 0.2) && within(v.phi_sp_ne, sp, 0.2));
        len_ok += usize::from(within(l.s.fit.length, rho_s, 0.25));
        lengths.push(l.s.fit.length);
        rows.push(format!("{:.2}/{:.2}/{:.1}", v.phi_p2p, v.phi_sp_ne, l.s.fit.length));
    }
    // A single 500-path variogram is too noisy for per-seed length recovery;
    // the estimator is judged on its median over the seeds.
    lengths.sort_by(f64::total_cmp);
    let median = 0.5 * (lengths[4] + lengths[5]);
    let secs = t.elapsed().as_secs_f64();
    Ok(Verdict::new(
        var_ok >= 8 && within(median, rho_s, 0.25) && secs < 300.0,
        format!(
            "variances within 20% on {var_ok}/10 seeds (need 8); median rho_s {median:.1} km vs {rho_s} km (within 25%), \
             per seed within 25% on {len_ok}/10; {secs:.1} s (< 300 s); phi_p2p/phi_sp/rho_s per seed: {}",
            rows.join(" ")
        ),
    ))
}
