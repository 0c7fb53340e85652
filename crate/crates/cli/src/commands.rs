use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use fasgen_core::analysis::{
    histogram, interfrequency_correlation, predict_map, residual_stats, within_path_residuals, DensityConfig,
    MapGrid, Predictor, HIST_BINS, HIST_RANGE,
};
use fasgen_core::cgm::{
    calibrate_alpha, dataset_conditions, default_alpha_grid, ensemble_stats, load_checkpoint, mid_band_residual_std,
    sample_each, save_checkpoint, train, ArchConfig, CgmFasModel, LossRecord, TrainingConfig, MID_BAND_EDGE,
};
use fasgen_core::dataset::{
    dataset_csv, frequencies_csv, load_dataset, synth_generate, GridSpec, ResidualDataset, SynthConfig, DATASET_FILE,
    FREQUENCY_FILE,
};
use fasgen_core::format::sig9;
use fasgen_core::geo::GeoPoint;
use fasgen_core::gp::{fit_variances, predict, FitFile, FrequencyRecord, GpFit, KernelPath};
use fasgen_core::variogram::{estimate_path_lengths, to_csv, VariogramConfig};
use fasgen_core::Error;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::manifest::Run;
use crate::{
    Cli, Command, DensityArgs, FitGpArgs, GridArgs, PredictMapArgs, SynthArgs, TrainArgs, ValidateArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::FitGp(a) => fit_gp(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::PredictMap(a) => predict_map_cmd(cli, a),
        Command::Validate(a) => validate(cli, a),
        Command::Density(a) => density(cli, a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    Ok(toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?)
}

fn out_dir(path: &Path) -> Result<()> {
    Ok(fs::create_dir_all(path).map_err(|e| Error::io(path, e))?)
}

fn grid_spec(cli: &Cli, g: &GridArgs) -> GridSpec {
    let base = if cli.full_scale { GridSpec::full_scale() } else { GridSpec::default() };
    GridSpec {
        n_freq: g.n_freq.unwrap_or(base.n_freq),
        f_min: g.f_min,
        f_max: g.f_max,
        ..base
    }
}

fn load(cli: &Cli, path: &Path, g: &GridArgs) -> Result<(ResidualDataset, GridSpec)> {
    let spec = grid_spec(cli, g);
    spec.validate()?;
    Ok((load_dataset(path, Some(&spec))?, spec))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| usage(format!("{what}: `{t}` is not a number")))
        })
        .collect()
}

/// Grid positions for `all` or a list of Hz values (nearest point, deduplicated).
fn freq_indices(s: &str, grid: &[f64]) -> Result<Vec<usize>> {
    if s.trim() == "all" {
        return Ok((0..grid.len()).collect());
    }
    let mut idx: Vec<usize> = parse_list(s, "frequencies")?.into_iter().map(|f| nearest(grid, f)).collect();
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

fn nearest(grid: &[f64], hz: f64) -> usize {
    let lf = hz.ln();
    (0..grid.len())
        .min_by(|&a, &b| (grid[a].ln() - lf).abs().total_cmp(&(grid[b].ln() - lf).abs()))
        .unwrap_or(0)
}

fn parse_event(s: &str) -> Result<GeoPoint> {
    let v = parse_list(s, "event")?;
    if v.len() != 3 {
        return Err(usage(format!("event must be `lat,lon,depth_km`, got `{s}`")));
    }
    Ok(GeoPoint::new(v[0], v[1], v[2])?)
}

fn resolve_arch(cli: &Cli, path: Option<&PathBuf>, n_freq: usize) -> Result<ArchConfig> {
    let arch = match path {
        Some(p) => read_toml::<ArchConfig>(p)?,
        None if cli.full_scale => ArchConfig::full_scale(n_freq),
        None => ArchConfig::new(n_freq),
    };
    if arch.n_freq != n_freq {
        return Err(usage(format!(
            "architecture expects {} frequencies, dataset grid has {n_freq}",
            arch.n_freq
        )));
    }
    arch.validate()?;
    Ok(arch)
}

fn training_config(path: Option<&PathBuf>) -> Result<TrainingConfig> {
    let cfg = match path {
        Some(p) => read_toml::<TrainingConfig>(p)?,
        None => TrainingConfig::default(),
    };
    Ok(cfg)
}

/// GP posterior from a fit file and the dataset observations at the fitted
/// frequencies.
fn gp_from_file(ds: &ResidualDataset, fit_path: &Path) -> Result<GpFit> {
    let ff = FitFile::from_toml(&read_text(fit_path)?)?;
    if ff.frequency.is_empty() {
        return Err(Error::Schema(format!("{}: no frequencies", fit_path.display())).into());
    }
    let grid = ds.grid.values();
    let mut freqs = Vec::new();
    let mut cols = Vec::new();
    let mut thetas = Vec::new();
    for r in &ff.frequency {
        let i = nearest(grid, r.freq_hz);
        if (grid[i] / r.freq_hz - 1.0).abs() > 1e-6 {
            return Err(Error::Schema(format!(
                "fit frequency {} Hz is not on the working grid (nearest {} Hz)",
                r.freq_hz, grid[i]
            ))
            .into());
        }
        freqs.push(grid[i]);
        cols.push(ds.column(i));
        thetas.push(r.theta());
    }
    Ok(GpFit::new(ds.kernel_paths()?, &freqs, &cols, &thetas)?)
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    seed: u64,
    synth: &'a SynthConfig,
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut run = Run::new("synth", cli.full_scale, cli.threads);
    let cfg = match &a.config {
        Some(p) => {
            run.input("config", p);
            SynthConfig::from_toml(&read_text(p)?)?
        }
        None if cli.full_scale => SynthConfig {
            grid: GridSpec::full_scale(),
            ..SynthConfig::default()
        },
        None => SynthConfig::default(),
    };
    let (ds, truth) = synth_generate(&cfg, a.seed)?;
    out_dir(&a.out)?;
    run.write(&a.out, DATASET_FILE, dataset_csv(&ds))?;
    run.write(&a.out, FREQUENCY_FILE, frequencies_csv(&ds.grid))?;
    run.write(&a.out, "truth.toml", truth.summary_toml(ds.grid.values()))?;
    run.write(&a.out, "truth_path_terms.csv", truth.path_terms_csv(&ds))?;
    run.write(&a.out, "synth_config.toml", cfg.to_toml())?;
    println!(
        "synth: {} recordings, {} events, {} stations, {} frequencies",
        ds.len(),
        ds.events.len(),
        ds.stations.len(),
        ds.n_freq()
    );
    run.finish(&a.out, &SynthManifest { seed: a.seed, synth: &cfg })
}

#[derive(Serialize)]
struct FitGpManifest<'a> {
    freqs: &'a str,
    grid: GridSpec,
    variogram: VariogramConfig,
}

fn fit_gp(cli: &Cli, a: &FitGpArgs) -> Result<()> {
    let mut run = Run::new("fit-gp", cli.full_scale, cli.threads);
    run.input("dataset", &a.dataset);
    let (ds, spec) = load(cli, &a.dataset, &a.grid)?;
    let vcfg = match &a.variogram {
        Some(p) => {
            run.input("variogram", p);
            read_toml::<VariogramConfig>(p)?
        }
        None => VariogramConfig::default(),
    };
    let idx = freq_indices(&a.freqs, ds.grid.values())?;
    let paths = ds.kernel_paths()?;
    let fits = idx
        .par_iter()
        .map(|&f| {
            let lengths = estimate_path_lengths(&ds, f, &vcfg)?;
            let l = lengths.lengths();
            let v = fit_variances(&ds.column(f), &paths, l)?;
            let rec = FrequencyRecord {
                freq_hz: ds.grid.values()[f],
                phi_p2p: v.phi_p2p,
                phi_sp_ne: v.phi_sp_ne,
                rho_r: l.rho_r,
                rho_az: l.rho_az,
                rho_s: l.rho_s,
                log_likelihood: v.log_likelihood,
                converged: v.converged,
                boundary_axes: lengths.flagged_axes(),
            };
            Ok((rec, v.sweeps))
        })
        .collect::<fasgen_core::Result<Vec<_>>>()?;
    let mut diag = String::from(
        "freq_hz,rho_r_km,rho_az_deg,rho_s_km,phi_p2p,phi_sp_ne,log_likelihood,converged,sweeps,boundary_axes\n",
    );
    for (r, sweeps) in &fits {
        let _ = writeln!(
            diag,
            "{},{},{},{},{},{},{},{},{},{}",
            sig9(r.freq_hz),
            sig9(r.rho_r),
            sig9(r.rho_az),
            sig9(r.rho_s),
            sig9(r.phi_p2p),
            sig9(r.phi_sp_ne),
            sig9(r.log_likelihood),
            r.converged,
            sweeps,
            r.boundary_axes.join(";")
        );
        if !r.converged {
            eprintln!("warning: variance fit at {} Hz did not converge", sig9(r.freq_hz));
        }
    }
    let file = FitFile {
        frequency: fits.into_iter().map(|(r, _)| r).collect(),
    };
    out_dir(&a.out)?;
    run.write(&a.out, "fit.toml", file.to_toml())?;
    run.write(&a.out, "diagnostics.csv", diag)?;
    println!("fit-gp: {} frequencies from {} recordings", file.frequency.len(), ds.len());
    run.finish(
        &a.out,
        &FitGpManifest {
            freqs: &a.freqs,
            grid: spec,
            variogram: vcfg,
        },
    )
}

#[derive(Serialize)]
struct TrainManifest {
    mode: &'static str,
    grid: GridSpec,
    arch: ArchConfig,
    training: TrainingConfig,
    alpha_grid: Vec<f64>,
    target: f64,
    tol: f64,
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut run = Run::new("train", cli.full_scale, cli.threads);
    run.input("dataset", &a.dataset);
    let (ds, spec) = load(cli, &a.dataset, &a.grid)?;
    if let Some(p) = &a.arch {
        run.input("arch", p);
    }
    if let Some(p) = &a.training {
        run.input("training", p);
    }
    let arch = resolve_arch(cli, a.arch.as_ref(), ds.n_freq())?;
    let mut tcfg = training_config(a.training.as_ref())?;
    tcfg.seed = a.seed;
    if let Some(e) = a.epochs {
        tcfg.max_epochs = e;
    }
    if let Some(p) = a.patience {
        tcfg.patience = p;
    }
    out_dir(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    let mut manifest = TrainManifest {
        mode: "single",
        grid: spec,
        arch,
        training: tcfg.clone(),
        alpha_grid: Vec::new(),
        target: a.target,
        tol: a.tol,
    };
    if let Some(alpha) = a.alpha {
        tcfg.alpha = alpha;
        manifest.training.alpha = alpha;
        let out = train(&ds, arch, &tcfg)?;
        save_checkpoint(&out.model, &ckpt)?;
        run.record("model.ckpt");
        run.write(&a.out, "loss.csv", LossRecord::csv(&out.log))?;
        let stats = mid_band_residual_std(&out.model, &ds, fasgen_core::cgm::DEFAULT_ENSEMBLE, tcfg.seed)?;
        println!(
            "train: alpha {} best epoch {} of {}, mid-band residual std {}",
            sig9(alpha),
            out.best_epoch,
            out.log.len(),
            sig9(stats.residual_std)
        );
    } else {
        let grid = match &a.alphas {
            Some(s) => parse_list(s, "alphas")?,
            None => default_alpha_grid(8),
        };
        manifest.mode = "calibrate";
        manifest.alpha_grid = grid.clone();
        let cal = calibrate_alpha(&ds, arch, &tcfg, &grid, a.target, a.tol)?;
        save_checkpoint(&cal.model, &ckpt)?;
        run.record("model.ckpt");
        run.write(&a.out, "loss.csv", LossRecord::csv(&cal.outcome_log))?;
        run.write(&a.out, "calibration.csv", cal.csv())?;
        println!(
            "train: selected alpha {} with mid-band residual std {} (target {} +/- {})",
            sig9(cal.alpha),
            sig9(cal.rows[cal.best_index].stats.residual_std),
            sig9(a.target),
            sig9(a.tol)
        );
        if !cal.within_tolerance {
            eprintln!("warning: no alpha on the grid reached the target within tolerance");
        }
        if !cal.is_monotone(0.0) {
            eprintln!("warning: residual std is not monotone in alpha over the grid");
        }
    }
    run.finish(&a.out, &manifest)
}

#[derive(Serialize)]
struct MapManifest<'a> {
    predictor: &'static str,
    event: [f64; 3],
    grid_km: f64,
    size: Option<usize>,
    freqs: &'a str,
    ensemble: usize,
    seed: u64,
    grid: GridSpec,
}

fn predict_map_cmd(cli: &Cli, a: &PredictMapArgs) -> Result<()> {
    let mut run = Run::new("predict-map", cli.full_scale, cli.threads);
    let event = parse_event(&a.event)?;
    let spec = grid_spec(cli, &a.grid);
    let start = Instant::now();
    let (map, predictor) = if let Some(m) = &a.model {
        run.input("model", m);
        let model = load_checkpoint(m)?;
        let frame = model.norm.frame;
        let lattice = match a.size {
            Some(n) => MapGrid::square(frame, frame.project(&event), n, a.grid_km)?,
            None => MapGrid::new(frame, model.norm.x_range, model.norm.y_range, a.grid_km)?,
        };
        let idx = freq_indices(&a.freqs, &model.norm.freqs)?;
        let p = Predictor::Cgm {
            model: &model,
            ensemble: a.ensemble,
            seed: a.seed,
        };
        (predict_map(p, &event, &lattice, &idx)?, "cgm")
    } else {
        let (fit_path, ds_path) = match (&a.fit, &a.dataset) {
            (Some(f), Some(d)) => (f, d),
            _ => return Err(usage("predict-map needs --model, or --fit with --dataset")),
        };
        run.input("fit", fit_path);
        run.input("dataset", ds_path);
        let (ds, _) = load(cli, ds_path, &a.grid)?;
        let fit = gp_from_file(&ds, fit_path)?;
        let lattice = match a.size {
            Some(n) => MapGrid::square(ds.frame, ds.frame.project(&event), n, a.grid_km)?,
            None => MapGrid::covering(&ds, a.grid_km)?,
        };
        let fit_freqs: Vec<f64> = fit.frequencies().iter().map(|f| f.freq_hz).collect();
        let idx = freq_indices(&a.freqs, &fit_freqs)?;
        (predict_map(Predictor::Gp(&fit), &event, &lattice, &idx)?, "gp")
    };
    let secs = start.elapsed().as_secs_f64();
    out_dir(&a.out)?;
    run.write(&a.out, "map.csv", map.csv())?;
    println!(
        "predict-map: {} sites x {} frequencies ({} values) in {secs:.3} s",
        map.n_sites(),
        map.freqs.len(),
        map.n_sites() * map.freqs.len()
    );
    run.finish(
        &a.out,
        &MapManifest {
            predictor,
            event: [event.lat, event.lon, event.depth],
            grid_km: a.grid_km,
            size: a.size,
            freqs: &a.freqs,
            ensemble: a.ensemble,
            seed: a.seed,
            grid: spec,
        },
    )
}

#[derive(Serialize)]
struct ValidateManifest {
    at_hz: f64,
    ensemble: usize,
    seed: u64,
    grid: GridSpec,
    histogram_bins: usize,
    histogram_range: f64,
    mid_band_edge: f64,
}

fn column(rows: &[Vec<f64>], f: usize) -> Vec<f64> {
    rows.iter().map(|r| r[f]).collect()
}

fn validate(cli: &Cli, a: &ValidateArgs) -> Result<()> {
    if a.model.is_none() && a.fit.is_none() {
        return Err(usage("validate needs --model and/or --fit"));
    }
    let mut run = Run::new("validate", cli.full_scale, cli.threads);
    run.input("dataset", &a.dataset);
    let (ds, spec) = load(cli, &a.dataset, &a.grid)?;
    let freqs = ds.grid.values().to_vec();
    let fi = ds.grid.nearest_index(a.at_hz);
    let band = ds.grid.interior(MID_BAND_EDGE);
    out_dir(&a.out)?;
    let mut summary = String::new();
    let observed: Vec<Vec<f64>> = ds.recordings.iter().map(|r| r.dws.clone()).collect();
    let obs_corr = interfrequency_correlation(&freqs, &observed)?;
    run.write(&a.out, "correlation_observed.csv", obs_corr.csv())?;

    if let Some(m) = &a.model {
        run.input("model", m);
        let model: CgmFasModel = load_checkpoint(m)?;
        if model.norm.freqs.len() != ds.n_freq() {
            return Err(usage(format!(
                "model has {} frequencies, dataset grid has {}",
                model.norm.freqs.len(),
                ds.n_freq()
            )));
        }
        let conds = dataset_conditions(&model, &ds);
        let stats = ensemble_stats(&model, &conds, a.ensemble, a.seed)?;
        let terms: Vec<Vec<f64>> = stats.iter().map(|s| s.mean.clone()).collect();
        let resid = within_path_residuals(&ds, &terms)?;
        let rs = residual_stats(&resid);
        run.write(&a.out, "residual_stats_cgm.csv", rs.csv(&freqs))?;
        let h = histogram(&column(&resid, fi), HIST_BINS, -HIST_RANGE, HIST_RANGE)?;
        run.write(&a.out, "histogram_cgm.csv", h.csv())?;
        let generated = sample_each(&model, &conds, a.seed)?;
        let gen_corr = interfrequency_correlation(&freqs, &generated)?;
        run.write(&a.out, "correlation_cgm.csv", gen_corr.csv())?;
        let mb = mid_band_residual_std(&model, &ds, a.ensemble, a.seed)?;
        let _ = writeln!(
            summary,
            "[cgm]\nmid_band_residual_std = {}\nmid_band_max_abs_mean = {}\nmid_band_ensemble_std = {}\ncorrelation_max_abs_deviation = {}\n",
            sig9(mb.residual_std),
            sig9(mb.max_abs_mean),
            sig9(mb.ensemble_std),
            sig9(gen_corr.max_abs_deviation(&obs_corr, band.clone()))
        );
    }

    if let Some(f) = &a.fit {
        run.input("fit", f);
        let fit = gp_from_file(&ds, f)?;
        let targets = (0..ds.len())
            .map(|i| ds.geometry(i).map(KernelPath::target))
            .collect::<fasgen_core::Result<Vec<_>>>()?;
        let preds = (0..fit.n_freq())
            .into_par_iter()
            .map(|k| predict(&fit, k, &targets))
            .collect::<fasgen_core::Result<Vec<_>>>()?;
        let gfreqs: Vec<f64> = fit.frequencies().iter().map(|f| f.freq_hz).collect();
        let gidx: Vec<usize> = gfreqs.iter().map(|&hz| ds.grid.nearest_index(hz)).collect();
        let resid: Vec<Vec<f64>> = ds
            .recordings
            .iter()
            .enumerate()
            .map(|(i, r)| gidx.iter().zip(&preds).map(|(&g, p)| r.dws[g] - p.mean[i]).collect())
            .collect();
        let rs = residual_stats(&resid);
        run.write(&a.out, "residual_stats_gp.csv", rs.csv(&gfreqs))?;
        let k = nearest(&gfreqs, a.at_hz);
        let h = histogram(&column(&resid, k), HIST_BINS, -HIST_RANGE, HIST_RANGE)?;
        run.write(&a.out, "histogram_gp.csv", h.csv())?;
        let _ = writeln!(
            summary,
            "[gp]\nhistogram_freq_hz = {}\nmean_residual_std = {}\n",
            sig9(gfreqs[k]),
            sig9(rs.std.iter().sum::<f64>() / rs.std.len() as f64)
        );
    }

    if ds.len() >= 100 {
        let pl = estimate_path_lengths(&ds, fi, &VariogramConfig::default())?;
        for (name, axis) in [("dr", &pl.r), ("daz", &pl.az), ("dss", &pl.s)] {
            run.write(
                &a.out,
                &format!("variogram_{name}.csv"),
                to_csv(&axis.semivariogram, Some(&axis.fit)),
            )?;
        }
    } else {
        eprintln!("warning: fewer than 100 recordings, variograms skipped");
    }
    run.write(&a.out, "summary.toml", summary)?;
    println!("validate: {} recordings, outputs in {}", ds.len(), a.out.display());
    run.finish(
        &a.out,
        &ValidateManifest {
            at_hz: a.at_hz,
            ensemble: a.ensemble,
            seed: a.seed,
            grid: spec,
            histogram_bins: HIST_BINS,
            histogram_range: HIST_RANGE,
            mid_band_edge: MID_BAND_EDGE,
        },
    )
}

#[derive(Serialize)]
struct DensityManifest {
    separations_km: Vec<f64>,
    subsets: usize,
    at_hz: f64,
    ensemble: usize,
    seed: u64,
    grid: GridSpec,
    arch: ArchConfig,
    training: TrainingConfig,
}

fn density(cli: &Cli, a: &DensityArgs) -> Result<()> {
    let mut run = Run::new("density", cli.full_scale, cli.threads);
    run.input("dataset", &a.dataset);
    let (ds, spec) = load(cli, &a.dataset, &a.grid)?;
    if let Some(p) = &a.arch {
        run.input("arch", p);
    }
    if let Some(p) = &a.training {
        run.input("training", p);
    }
    let arch = resolve_arch(cli, a.arch.as_ref(), ds.n_freq())?;
    let mut tcfg = training_config(a.training.as_ref())?;
    tcfg.alpha = a.alpha;
    tcfg.seed = a.seed;
    if let Some(e) = a.epochs {
        tcfg.max_epochs = e;
    }
    let seps = parse_list(&a.separations, "separations")?;
    let cfg = DensityConfig {
        separations_km: seps.clone(),
        n_subsets: a.subsets,
        seed: a.seed,
        freq_hz: a.at_hz,
        ensemble: a.ensemble,
        arch,
        training: tcfg.clone(),
    };
    let table = fasgen_core::analysis::density_experiment(&ds, &cfg)?;
    out_dir(&a.out)?;
    run.write(&a.out, "density.csv", table.csv())?;
    let mut means = String::from("separation_km,mean_mse\n");
    for (s, m) in table.means() {
        let _ = writeln!(means, "{},{}", sig9(s), m.map_or(String::new(), sig9));
    }
    run.write(&a.out, "density_means.csv", &means)?;
    print!("density at {} Hz:\n{means}", sig9(table.freq_hz));
    run.finish(
        &a.out,
        &DensityManifest {
            separations_km: seps,
            subsets: a.subsets,
            at_hz: a.at_hz,
            ensemble: a.ensemble,
            seed: a.seed,
            grid: spec,
            arch,
            training: tcfg,
        },
    )
}
