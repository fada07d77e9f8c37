//! Per-channel z-scoring over observed entries.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::types::TimeSeriesBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Mean and sample standard deviation of each channel over observed entries.
    /// Channels with fewer than two observations, or zero spread, get std 1.
    pub fn fit(batch: &TimeSeriesBatch) -> Self {
        let d = batch.dims();
        let mut mean = vec![0.0; d.channels];
        let mut std = vec![1.0; d.channels];
        for k in 0..d.channels {
            let observed: Vec<f64> = (0..d.samples)
                .flat_map(|b| {
                    batch
                        .row(b, k)
                        .iter()
                        .zip(batch.obs_mask().row(b, k))
                        .filter(|(_, &m)| m)
                        .map(|(&v, _)| v)
                })
                .collect();
            let n = observed.len();
            if n == 0 {
                continue;
            }
            let m = observed.iter().sum::<f64>() / n as f64;
            mean[k] = m;
            if n >= 2 {
                let var = observed.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                if var > 0.0 {
                    std[k] = var.sqrt();
                }
            }
        }
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Scale `(x − mean) / std` on observed entries; unobserved entries are carried.
    pub fn apply(&self, batch: &TimeSeriesBatch) -> Result<TimeSeriesBatch> {
        self.map_observed(batch, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, batch: &TimeSeriesBatch) -> Result<TimeSeriesBatch> {
        self.map_observed(batch, |v, m, s| v * s + m)
    }

    /// Inverse transform of a raw `[B, K, L]` value buffer, every entry.
    pub fn invert_values(&self, values: &[f64], channels: usize, steps: usize) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let k = (i / steps) % channels;
                v * self.std[k] + self.mean[k]
            })
            .collect()
    }

    fn map_observed(
        &self,
        batch: &TimeSeriesBatch,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<TimeSeriesBatch> {
        let d = batch.dims();
        ensure!(
            self.mean.len() == d.channels && self.std.len() == d.channels,
            Shape,
            "stats for {} channels applied to {} channels",
            self.mean.len(),
            d.channels
        );
        let mut values = batch.values().to_vec();
        for b in 0..d.samples {
            for k in 0..d.channels {
                let row = d.row(b, k);
                for (v, &m) in values[row].iter_mut().zip(batch.obs_mask().row(b, k)) {
                    if m {
                        *v = f(*v, self.mean[k], self.std[k]);
                    }
                }
            }
        }
        batch.with_values(values)
    }
}

pub fn normalize(batch: &TimeSeriesBatch) -> Result<(TimeSeriesBatch, NormalizationStats)> {
    let stats = NormalizationStats::fit(batch);
    Ok((stats.apply(batch)?, stats))
}

pub fn denormalize(batch: &TimeSeriesBatch, stats: &NormalizationStats) -> Result<TimeSeriesBatch> {
    stats.invert(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::types::{Dims, Mask};
    use rand::Rng as _;

    #[test]
    fn two_point_stats() {
        let d = Dims::new(1, 1, 3);
        let mask = Mask::from_bits(d, vec![true, false, true]).unwrap();
        let b = TimeSeriesBatch::new(d, vec![1.0, f64::NAN, 3.0], vec![0.0, 1.0, 2.0], mask).unwrap();
        let s = NormalizationStats::fit(&b);
        assert_eq!(s.mean, vec![2.0]);
        assert!((s.std[0] - 2f64.sqrt()).abs() < 1e-15);
        let (n, _) = normalize(&b).unwrap();
        assert!(n.values()[1].is_nan());
    }

    #[test]
    fn fully_masked_channel_is_identity() {
        let d = Dims::new(2, 2, 2);
        let bits = vec![true, true, false, false, true, true, false, false];
        let mask = Mask::from_bits(d, bits).unwrap();
        let values = vec![1.0, 2.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0];
        let b = TimeSeriesBatch::new(d, values.clone(), vec![0.0, 1.0, 0.0, 1.0], mask).unwrap();
        let (n, s) = normalize(&b).unwrap();
        assert_eq!((s.mean[1], s.std[1]), (0.0, 1.0));
        assert_eq!(&n.values()[2..4], &values[2..4]);
    }

    #[test]
    fn round_trip_on_random_batch() {
        let d = Dims::new(6, 3, 40);
        let mut rng = seeded(3);
        let values: Vec<f64> = (0..d.len()).map(|_| rng.random_range(-50.0..50.0)).collect();
        let bits = (0..d.len()).map(|_| rng.random::<f64>() < 0.7).collect();
        let t = (0..d.samples).flat_map(|_| (0..d.steps).map(|l| l as f64)).collect();
        let b = TimeSeriesBatch::new(d, values, t, Mask::from_bits(d, bits).unwrap()).unwrap();
        let (n, s) = normalize(&b).unwrap();
        let back = denormalize(&n, &s).unwrap();
        let err = b
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "round trip error {err}");
    }
}
