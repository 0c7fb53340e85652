use std::collections::BTreeSet;
use std::fmt::Write as _;

use fasgen_neural::{Adam, ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::generate::dataset_conditions;
use super::model::{Batch, CgmFasModel};
use super::{ArchConfig, ConditioningVector, Normalization};
use crate::dataset::ResidualDataset;
use crate::format::sig9;
use crate::{Error, Result};

/// Loss above which training is declared divergent.
const DIVERGENCE: f64 = 1e3;

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_EPS: u64 = 2;
const STREAM_SPLIT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// KL weight.
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of events held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 3e-5,
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 300,
            seed: 0,
            patience: 25,
            val_fraction: 0.1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("training: {m}")));
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 0.5), got {}", self.val_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_mse: f64,
    pub train_kl: f64,
    /// Validation loss at the posterior mean; the training loss when no
    /// events are held out.
    pub val_total: f64,
}

impl LossRecord {
    pub fn csv(records: &[LossRecord]) -> String {
        let mut s = String::from("epoch,train_total,train_mse,train_kl,val_total\n");
        for r in records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                sig9(r.train_total),
                sig9(r.train_mse),
                sig9(r.train_kl),
                sig9(r.val_total)
            );
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch.
    pub model: CgmFasModel,
    pub log: Vec<LossRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Coordinate box over every event and station plus per-frequency residual
/// mean and standard deviation.
pub(crate) fn fit_normalization(ds: &ResidualDataset) -> Normalization {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut extend = |xy: [f64; 2], depth: Option<f64>| {
        for d in 0..2 {
            lo[d] = lo[d].min(xy[d]);
            hi[d] = hi[d].max(xy[d]);
        }
        if let Some(z) = depth {
            lo[2] = lo[2].min(z);
            hi[2] = hi[2].max(z);
        }
    };
    for e in &ds.events {
        extend(ds.frame.project(&e.location), Some(e.location.depth));
    }
    for s in &ds.stations {
        extend(ds.frame.project(&s.location), None);
    }
    let n = ds.len().max(1) as f64;
    let (mut mean, mut scale) = (Vec::new(), Vec::new());
    for f in 0..ds.n_freq() {
        let m = ds.recordings.iter().map(|r| r.dws[f]).sum::<f64>() / n;
        let v = ds.recordings.iter().map(|r| (r.dws[f] - m).powi(2)).sum::<f64>() / n;
        let sd = v.sqrt();
        mean.push(m as f32);
        scale.push(if sd > 1e-6 { sd as f32 } else { 1.0 });
    }
    Normalization {
        frame: ds.frame,
        x_range: [lo[0], hi[0]],
        y_range: [lo[1], hi[1]],
        depth_range: [lo[2], hi[2]],
        freqs: ds.grid.values().to_vec(),
        dws_mean: mean,
        dws_scale: scale,
    }
}

/// Holds out `ceil(fraction · events)` whole events, leaving at least one
/// for training; returns `(train, val)` recording indices.
fn split_by_event(ds: &ResidualDataset, fraction: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut events: Vec<usize> = (0..ds.events.len()).collect();
    events.shuffle(rng);
    let n_val = ((fraction * events.len() as f64).ceil() as usize).min(events.len().saturating_sub(1));
    let held: BTreeSet<usize> = events[..n_val].iter().copied().collect();
    (0..ds.len()).partition(|&i| !held.contains(&ds.key(i).event))
}

fn batch_of(model: &CgmFasModel, ds: &ResidualDataset, conds: &[ConditioningVector], idx: &[usize]) -> Result<Batch> {
    let rows: Vec<(&[f64], ConditioningVector)> = idx.iter().map(|&i| (&ds.recordings[i].dws[..], conds[i])).collect();
    model.make_batch(&rows)
}

/// Mean loss over `idx` with `z = μ`.
fn evaluate(model: &CgmFasModel, ds: &ResidualDataset, conds: &[ConditioningVector], idx: &[usize], bs: usize) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for chunk in idx.chunks(bs) {
        let batch = batch_of(model, ds, conds, chunk)?;
        let mut t = Tape::new();
        let eps = Tensor::zeros(&[chunk.len(), model.arch.latent_dim]);
        let (loss, _, _) = model.tape_loss(&mut t, &batch, eps, model.alpha as f32)?;
        total += f64::from(t.value(loss).item()) * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Mini-batch Adam on `mse + alpha·kl` with seeded shuffling and early
/// stopping on held-out events.
pub fn train(ds: &ResidualDataset, arch: ArchConfig, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if ds.n_freq() != arch.n_freq {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} frequencies, architecture expects {}",
            ds.n_freq(),
            arch.n_freq
        )));
    }
    let norm = fit_normalization(ds);
    let mut model = CgmFasModel::init(arch, norm, cfg.alpha, cfg.seed, &mut rng_stream(cfg.seed, STREAM_INIT))?;
    let conds = dataset_conditions(&model, ds);
    let (mut train_idx, val_idx) = split_by_event(ds, cfg.val_fraction, &mut rng_stream(cfg.seed, STREAM_SPLIT));
    let mut shuffle = rng_stream(cfg.seed, STREAM_SHUFFLE);
    let mut eps_rng = rng_stream(cfg.seed, STREAM_EPS);
    let mut adam = Adam::new(&model.params);
    let (lr, alpha, latent) = (cfg.lr as f32, cfg.alpha as f32, arch.latent_dim);

    let mut log = Vec::new();
    let mut best: (f64, usize, ParamSet) = (f64::INFINITY, 0, model.params.clone());
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut shuffle);
        let mut sums = [0.0f64; 3];
        for (b, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let batch = batch_of(&model, ds, &conds, chunk)?;
            let eps: Vec<f32> = (0..chunk.len() * latent).map(|_| eps_rng.sample(StandardNormal)).collect();
            let mut t = Tape::new();
            let (total, mse, kl) = model.tape_loss(&mut t, &batch, Tensor::new(vec![chunk.len(), latent], eps)?, alpha)?;
            let vals = [total, mse, kl].map(|v| f64::from(t.value(v).item()));
            if !vals[0].is_finite() || vals[0] > DIVERGENCE {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {epoch}, batch {b}: total {}, mse {}, kl {}",
                    vals[0], vals[1], vals[2]
                )));
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * chunk.len() as f64;
            }
            let grads = t.backward(total);
            let g = t.param_grads(&grads, &model.params);
            adam.step(&mut model.params, &g, lr)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
        }
        let n = train_idx.len() as f64;
        let [train_total, train_mse, train_kl] = sums.map(|s| s / n);
        let val_total = if val_idx.is_empty() {
            train_total
        } else {
            evaluate(&model, ds, &conds, &val_idx, cfg.batch_size)?
        };
        log.push(LossRecord {
            epoch,
            train_total,
            train_mse,
            train_kl,
            val_total,
        });
        if val_total < best.0 {
            best = (val_total, epoch, model.params.clone());
        } else if epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.1,
        stopped_early,
    })
}
