//! Batched, masked, possibly irregularly sampled multivariate time series.
//!
//! Layout is row-major `[sample, channel, step]` for values and masks and
//! `[sample, step]` for timestamps. Timestamps are per sample so that each
//! series may live on its own irregular grid.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Batch dimensions: `B` samples, `K` channels, `L` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub samples: usize,
    pub channels: usize,
    pub steps: usize,
}

impl Dims {
    pub const fn new(samples: usize, channels: usize, steps: usize) -> Self {
        Self {
            samples,
            channels,
            steps,
        }
    }

    pub const fn len(&self) -> usize {
        self.samples * self.channels * self.steps
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, b: usize, k: usize, l: usize) -> usize {
        (b * self.channels + k) * self.steps + l
    }

    /// Flat range of the `(b, k)` row.
    #[inline]
    pub const fn row(&self, b: usize, k: usize) -> Range<usize> {
        let start = (b * self.channels + k) * self.steps;
        start..start + self.steps
    }

    /// Number of `(sample, channel)` rows.
    pub const fn rows(&self) -> usize {
        self.samples * self.channels
    }

    /// Same channel/step layout with a different sample count.
    pub const fn with_samples(&self, samples: usize) -> Self {
        Self::new(samples, self.channels, self.steps)
    }
}

/// Binary mask over a `[B, K, L]` batch (`true` = present).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    bits: Vec<bool>,
}

impl Mask {
    pub fn full(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![true; dims.len()],
        }
    }

    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![false; dims.len()],
        }
    }

    pub fn from_bits(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        ensure!(
            bits.len() == dims.len(),
            Shape,
            "mask has {} entries, expected {}",
            bits.len(),
            dims.len()
        );
        Ok(Self { dims, bits })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, b: usize, k: usize, l: usize) -> bool {
        self.bits[self.dims.index(b, k, l)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, k: usize, l: usize, on: bool) {
        let i = self.dims.index(b, k, l);
        self.bits[i] = on;
    }

    pub fn row(&self, b: usize, k: usize) -> &[bool] {
        &self.bits[self.dims.row(b, k)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&m| m).count()
    }

    pub fn count_sample(&self, b: usize) -> usize {
        let start = self.dims.index(b, 0, 0);
        let end = start + self.dims.channels * self.dims.steps;
        self.bits[start..end].iter().filter(|&&m| m).count()
    }

    /// `self ≤ other` elementwise.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| !a || b)
    }

    /// Entries present in `self` but not in `other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims, other.dims);
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a && !b)
            .collect();
        Mask {
            dims: self.dims,
            bits,
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims, other.dims);
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a && b)
            .collect();
        Mask {
            dims: self.dims,
            bits,
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims, other.dims);
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a || b)
            .collect();
        Mask {
            dims: self.dims,
            bits,
        }
    }

    /// Mask as `0.0` / `1.0` floats.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Keep only the given samples, in order.
    pub fn select_samples(&self, samples: &[usize]) -> Mask {
        let per = self.dims.channels * self.dims.steps;
        let mut bits = Vec::with_capacity(samples.len() * per);
        for &b in samples {
            bits.extend_from_slice(&self.bits[b * per..(b + 1) * per]);
        }
        Mask {
            dims: self.dims.with_samples(samples.len()),
            bits,
        }
    }
}

/// Values, timestamps and observation mask for `B × K × L` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesBatch {
    dims: Dims,
    values: Vec<f64>,
    timestamps: Vec<f64>,
    obs_mask: Mask,
}

impl TimeSeriesBatch {
    pub fn new(dims: Dims, values: Vec<f64>, timestamps: Vec<f64>, obs_mask: Mask) -> Result<Self> {
        ensure!(
            values.len() == dims.len(),
            Shape,
            "values have {} entries, expected {}",
            values.len(),
            dims.len()
        );
        ensure!(
            timestamps.len() == dims.samples * dims.steps,
            Shape,
            "timestamps have {} entries, expected {}",
            timestamps.len(),
            dims.samples * dims.steps
        );
        ensure!(
            obs_mask.dims() == dims,
            Shape,
            "mask dims {:?} differ from batch dims {:?}",
            obs_mask.dims(),
            dims
        );
        for b in 0..dims.samples {
            let t = &timestamps[b * dims.steps..(b + 1) * dims.steps];
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("timestamps of sample {b}")));
            }
            ensure!(
                t.windows(2).all(|w| w[0] < w[1]),
                Invalid,
                "timestamps of sample {b} are not strictly increasing"
            );
        }
        Ok(Self {
            dims,
            values,
            timestamps,
            obs_mask,
        })
    }

    /// Fully observed batch.
    pub fn observed(dims: Dims, values: Vec<f64>, timestamps: Vec<f64>) -> Result<Self> {
        Self::new(dims, values, timestamps, Mask::full(dims))
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn obs_mask(&self) -> &Mask {
        &self.obs_mask
    }

    pub fn row(&self, b: usize, k: usize) -> &[f64] {
        &self.values[self.dims.row(b, k)]
    }

    /// Timestamps of sample `b`.
    pub fn times(&self, b: usize) -> &[f64] {
        &self.timestamps[b * self.dims.steps..(b + 1) * self.dims.steps]
    }

    pub fn with_mask(&self, obs_mask: Mask) -> Result<Self> {
        Self::new(self.dims, self.values.clone(), self.timestamps.clone(), obs_mask)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == self.dims.len(),
            Shape,
            "values have {} entries, expected {}",
            values.len(),
            self.dims.len()
        );
        Ok(Self {
            dims: self.dims,
            values,
            timestamps: self.timestamps.clone(),
            obs_mask: self.obs_mask.clone(),
        })
    }

    /// Copy with every unobserved value replaced by zero.
    pub fn zero_unobserved(&self) -> Self {
        let values = self
            .values
            .iter()
            .zip(self.obs_mask.bits())
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn select_samples(&self, samples: &[usize]) -> Self {
        let d = self.dims;
        let per = d.channels * d.steps;
        let mut values = Vec::with_capacity(samples.len() * per);
        let mut timestamps = Vec::with_capacity(samples.len() * d.steps);
        for &b in samples {
            values.extend_from_slice(&self.values[b * per..(b + 1) * per]);
            timestamps.extend_from_slice(self.times(b));
        }
        Self {
            dims: d.with_samples(samples.len()),
            values,
            timestamps,
            obs_mask: self.obs_mask.select_samples(samples),
        }
    }

    /// Median spacing between consecutive timestamps over all samples.
    pub fn median_spacing(&self) -> Option<f64> {
        let mut gaps: Vec<f64> = (0..self.dims.samples)
            .flat_map(|b| self.times(b).windows(2).map(|w| w[1] - w[0]))
            .collect();
        if gaps.is_empty() {
            return None;
        }
        gaps.sort_by(f64::total_cmp);
        let n = gaps.len();
        Some(if n % 2 == 1 {
            gaps[n / 2]
        } else {
            0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
        })
    }
}
