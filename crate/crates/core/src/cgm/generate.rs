use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::model::CgmFasModel;
use super::plan::{DecoderPlan, Scratch};
use super::ConditioningVector;
use crate::dataset::ResidualDataset;
use crate::{Error, Result};

/// Ensemble size used for path-term estimates.
pub const DEFAULT_ENSEMBLE: usize = 200;

/// Sites decoded together; bounds the latent and first-layer buffers.
const SITES_PER_BATCH: usize = 8;

/// Rows per transposed-convolution pass, small enough to stay in cache.
const DECODE_ROWS: usize = 32;

/// Independent generator for conditioning vector `index` under `root`.
pub fn site_rng(root: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(root);
    r.set_stream(index);
    r
}

/// Conditioning vector of every recording, in dataset order.
pub fn dataset_conditions(model: &CgmFasModel, ds: &ResidualDataset) -> Vec<ConditioningVector> {
    ds.recordings
        .iter()
        .map(|r| model.norm.condition(&r.event, &r.station))
        .collect()
}

/// Per-frequency ensemble mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Decodes `n` latent draws for each of `conds`, site `i` drawing from
/// `site_rng(root, first + i)`; rows are site-major, `[sites·n, n_freq]`.
fn decode_sites(
    model: &CgmFasModel,
    plan: &DecoderPlan,
    conds: &[ConditioningVector],
    n: usize,
    root: u64,
    first: u64,
) -> Result<Vec<f32>> {
    let (l, hidden) = (plan.latent(), plan.hidden());
    let emb = model.embed(conds)?;
    let offsets = plan.site_offsets(emb.data(), conds.len());
    let rows = conds.len() * n;
    let mut z = Vec::with_capacity(rows * l);
    for i in 0..conds.len() {
        let mut rng = site_rng(root, first + i as u64);
        z.extend((0..n * l).map(|_| rng.sample::<f32, _>(StandardNormal)));
    }
    let mut h = Vec::with_capacity(rows * hidden);
    for off in offsets.chunks(hidden) {
        for _ in 0..n {
            h.extend_from_slice(off);
        }
    }
    plan.add_latent(&z, rows, &mut h);
    let mut out = Vec::with_capacity(rows * model.arch.n_freq);
    let mut scratch = Scratch::default();
    for chunk in h.chunks(DECODE_ROWS * hidden) {
        plan.decode(chunk, &mut out, &mut scratch);
    }
    Ok(out)
}

/// `n` spectra for `cond` from independent standard-normal latent draws.
pub fn generate(model: &CgmFasModel, cond: ConditioningVector, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
    }
    let out = decode_sites(model, &DecoderPlan::new(model), &[cond], n, seed, 0)?;
    Ok(out
        .chunks(model.arch.n_freq)
        .map(|r| r.iter().map(|v| f64::from(*v)).collect())
        .collect())
}

fn stats(rows: &[f32], n: usize, n_freq: usize) -> EnsembleStats {
    let mut mean = vec![0.0f64; n_freq];
    for row in rows.chunks(n_freq) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += f64::from(*v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; n_freq];
    for row in rows.chunks(n_freq) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (f64::from(*v) - m).powi(2);
        }
    }
    let std = var.iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
    EnsembleStats { mean, std }
}

/// Ensemble statistics for every conditioning vector; site `i` uses
/// `site_rng(seed, i)`, so results do not depend on batching or threads.
pub fn ensemble_stats(model: &CgmFasModel, conds: &[ConditioningVector], n: usize, seed: u64) -> Result<Vec<EnsembleStats>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("ensemble size must be at least 2, got {n}")));
    }
    let per = SITES_PER_BATCH;
    let nf = model.arch.n_freq;
    let plan = DecoderPlan::new(model);
    let batches: Vec<Vec<EnsembleStats>> = conds
        .par_chunks(per)
        .enumerate()
        .map(|(b, chunk)| {
            let out = decode_sites(model, &plan, chunk, n, seed, (b * per) as u64)?;
            Ok(out.chunks(n * nf).map(|site| stats(site, n, nf)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// One generation per conditioning vector, cond `i` drawing from
/// `site_rng(seed, i)`.
pub fn sample_each(model: &CgmFasModel, conds: &[ConditioningVector], seed: u64) -> Result<Vec<Vec<f64>>> {
    let per = SITES_PER_BATCH * DECODE_ROWS;
    let plan = DecoderPlan::new(model);
    let batches: Vec<Vec<Vec<f64>>> = conds
        .par_chunks(per)
        .enumerate()
        .map(|(b, chunk)| {
            chunk
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let out = decode_sites(model, &plan, std::slice::from_ref(c), 1, seed, (b * per + i) as u64)?;
                    Ok(out.iter().map(|v| f64::from(*v)).collect())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// Path-term estimate: ensemble mean and spread over `n` generations.
pub fn predict_path_term(model: &CgmFasModel, cond: ConditioningVector, n: usize, seed: u64) -> Result<EnsembleStats> {
    Ok(ensemble_stats(model, &[cond], n, seed)?.remove(0))
}
