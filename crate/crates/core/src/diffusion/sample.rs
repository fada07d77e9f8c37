//! Ancestral reverse sampling with condition entries held fixed.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Conditioning, LscdModel};
use super::schedule::NoiseSchedule;
use crate::autodiff::{Graph, Tensor};
use crate::error::{ensure, Error, Result};
use crate::rng::{derive_seed, derived, Rng};

/// Anything that predicts the injected noise for a batch of noisy series.
pub trait NoisePredictor: Sync {
    /// Per-batch state reused across reverse steps.
    type Context: Send;

    fn prepare(&self, cond: &Conditioning) -> Result<Self::Context>;

    /// `ε̂` for `x_t [B, K, L]` at step `t` (same for every sample).
    fn predict(&self, ctx: &Self::Context, cond: &Conditioning, x_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl NoisePredictor for LscdModel {
    type Context = Option<Tensor>;

    fn prepare(&self, cond: &Conditioning) -> Result<Option<Tensor>> {
        ensure!(self.store.is_finite(), Invalid, "model parameters are not finite");
        let mut g = Graph::frozen();
        let d = cond.dims;
        let x_co = g.constant(Tensor::new(&[d.samples, d.channels, d.steps], cond.x_co.clone())?);
        Ok(self.encode(&mut g, x_co, cond)?.map(|z| g.value(z).clone()))
    }

    fn predict(&self, ctx: &Option<Tensor>, cond: &Conditioning, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut g = Graph::frozen();
        let d = cond.dims;
        let x = g.constant(Tensor::new(&[d.samples, d.channels, d.steps], x_t.to_vec())?);
        let z = ctx.as_ref().map(|z| g.constant(z.clone()));
        let steps = vec![t; d.samples];
        let eps = self.denoise(&mut g, x, cond, &steps, z)?;
        Ok(g.value(eps).data.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub n_draws: usize,
    /// Multiplier on the injected `σ(t)·z`; 0 gives the deterministic mean path.
    pub noise_scale: f64,
    /// Series per network call; draws of different samples share a batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_draws: 20, noise_scale: 1.0, batch_size: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Imputation {
    /// `[n_draws][B·K·L]`
    pub draws: Vec<Vec<f64>>,
    /// Entrywise median over draws.
    pub median: Vec<f64>,
}

/// Random stream of one `(draw, sample)` chain. It first yields the starting
/// noise for the free entries in row-major order, then the injected noise of
/// each reverse step `T, …, 1` in the same order.
pub fn chain_rng(seed: u64, draw: usize, sample: usize) -> Rng {
    derived(derive_seed(seed, draw as u64), sample as u64)
}

/// Runs `n_draws` reverse chains per sample. Entries outside the condition
/// mask start from `𝒩(0, 1)` and follow
/// `x_{t−1} = (x_t − β_t/√(1−α_t)·ε̂) / √(1−β_t) + σ(t)·z`;
/// condition entries equal `x_co` throughout.
pub fn sample_impute<P: NoisePredictor>(
    model: &P,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    cfg: &SampleConfig,
) -> Result<Imputation> {
    ensure!(cfg.n_draws >= 1, Invalid, "need at least one draw");
    ensure!(cfg.batch_size >= 1, Invalid, "sampling batch size must be positive");
    ensure!(cfg.noise_scale.is_finite() && cfg.noise_scale >= 0.0, Invalid, "noise scale must be non-negative");
    crate::alloc::retain_large_buffers();
    let d = cond.dims;
    let per = d.channels * d.steps;
    ensure!(d.samples > 0, Invalid, "nothing to impute");
    let units: Vec<(usize, usize)> = (0..cfg.n_draws).flat_map(|r| (0..d.samples).map(move |b| (r, b))).collect();
    let chunks: Vec<Vec<f64>> = units
        .par_chunks(cfg.batch_size)
        .map(|chunk| run_chains(model, schedule, cond, cfg, chunk))
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = chunks.concat();
    let draws: Vec<Vec<f64>> = flat.chunks(d.samples * per).map(<[f64]>::to_vec).collect();
    let median = entrywise_median(&draws);
    Ok(Imputation { draws, median })
}

fn run_chains<P: NoisePredictor>(
    model: &P,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    cfg: &SampleConfig,
    units: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let d = cond.dims;
    let per = d.channels * d.steps;
    let samples: Vec<usize> = units.iter().map(|&(_, b)| b).collect();
    let sub = cond.select(&samples);
    let free: Vec<bool> = sub.cond_mask.bits().iter().map(|m| !m).collect();
    let mut rngs: Vec<Rng> = units.iter().map(|&(r, b)| chain_rng(cfg.seed, r, b)).collect();
    let mut x = sub.x_co.clone();
    for (u, rng) in rngs.iter_mut().enumerate() {
        for i in u * per..(u + 1) * per {
            if free[i] {
                x[i] = StandardNormal.sample(rng);
            }
        }
    }
    let ctx = model.prepare(&sub)?;
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&ctx, &sub, &x, t)?;
        ensure!(eps.len() == x.len(), Shape, "noise prediction has {} entries, expected {}", eps.len(), x.len());
        if let Some(bad) = eps.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("noise prediction at step {t}, entry {bad}")));
        }
        let (a, c) = schedule.reverse_coefficients(t);
        let sigma = cfg.noise_scale * schedule.sigma2(t).sqrt();
        for (u, rng) in rngs.iter_mut().enumerate() {
            for i in u * per..(u + 1) * per {
                if free[i] {
                    let z: f64 = StandardNormal.sample(rng);
                    x[i] = a * (x[i] - c * eps[i]) + sigma * z;
                }
            }
        }
    }
    Ok(x)
}

fn entrywise_median(draws: &[Vec<f64>]) -> Vec<f64> {
    let n = draws[0].len();
    let mut col = vec![0.0; draws.len()];
    (0..n)
        .map(|i| {
            for (c, d) in col.iter_mut().zip(draws) {
                *c = d[i];
            }
            col.sort_by(f64::total_cmp);
            let m = col.len() / 2;
            if col.len() % 2 == 1 {
                col[m]
            } else {
                0.5 * (col[m - 1] + col[m])
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(entrywise_median(&[vec![3.0, 1.0], vec![1.0, 2.0], vec![2.0, 9.0]]), vec![2.0, 2.0]);
        assert_eq!(entrywise_median(&[vec![1.0], vec![4.0]]), vec![2.5]);
    }
}
