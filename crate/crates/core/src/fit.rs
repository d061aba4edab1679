//! Shared minibatch plumbing for the training loops.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng, Adam, AdamConfig, ParamSet};

/// Shuffled index chunks covering `0..n` once.
pub(crate) fn epoch_batches(n: usize, batch: usize, r: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Plain single-phase schedule used by the baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-3, batch_size: 64, seed: 0 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Runs `cfg.epochs` epochs of Adam. `batch_loss` must accumulate gradients
/// into the parameters and return the batch loss. Returns the per-epoch mean
/// loss.
pub(crate) fn fit<P, F>(params: &mut P, n: usize, cfg: &FitConfig, mut batch_loss: F) -> Result<Vec<f64>>
where
    P: ParamSet,
    F: FnMut(&mut P, &[usize], &mut rng::StreamRng) -> Result<f64>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mut adam = Adam::new(params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, rng::streams::TRAIN_BASE + epoch as u64);
        let mut sum = 0.0;
        for idx in epoch_batches(n, cfg.batch_size, &mut r) {
            let l = batch_loss(params, &idx, &mut r)?;
            if !l.is_finite() {
                return Err(Error::NonFinite { term: "loss".into(), epoch });
            }
            sum += l * idx.len() as f64;
            adam.step(params);
            if !params.all_finite() {
                return Err(Error::NonFinite { term: "parameters".into(), epoch });
            }
        }
        history.push(sum / n as f64);
    }
    Ok(history)
}

/// Worker count for sampling: `CDVAE_THREADS` when set, else rayon's default.
pub fn sampling_threads() -> usize {
    std::env::var("CDVAE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Evaluates `f` for every index on a pool capped by [`sampling_threads`].
/// Results are in index order and independent of the thread count.
pub(crate) fn par_map<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sampling_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..count).into_par_iter().map(&f).collect())
}
