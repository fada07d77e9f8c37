//! FFT power spectra of gap-filled series and leading-frequency helpers.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::baselines::lerp_row;
use crate::error::{ensure, Result};
use crate::types::{Mask, TimeSeriesBatch};

/// How gaps are filled before the FFT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapFill {
    /// Linear interpolation, constant beyond the endpoints.
    #[default]
    Lerp,
    Zero,
}

/// One-sided FFT power `|X_k|² / N` for `k = 1..=N/2` per `(sample, channel)`.
#[derive(Clone, Debug)]
pub struct FftSpectrum {
    pub samples: usize,
    pub channels: usize,
    /// Bin frequencies in Hz.
    pub freqs: Vec<f64>,
    /// `[B·K, N/2]`
    pub power: Vec<f64>,
}

impl FftSpectrum {
    pub fn row(&self, b: usize, k: usize) -> &[f64] {
        let j = self.freqs.len();
        let r = b * self.channels + k;
        &self.power[r * j..(r + 1) * j]
    }
}

/// Fills the entries outside `mask` and takes the FFT of each row. Rows are
/// assumed to lie on a uniform grid with spacing equal to the batch median.
pub fn fft_psd_with_fill(batch: &TimeSeriesBatch, mask: &Mask, fill: GapFill) -> Result<FftSpectrum> {
    let d = batch.dims();
    ensure!(mask.dims() == d, Shape, "mask does not match batch");
    ensure!(d.steps >= 2, Invalid, "FFT needs at least two steps");
    let dt = batch
        .median_spacing()
        .ok_or_else(|| crate::Error::Invalid("cannot infer sampling interval".into()))?;
    let n = d.steps;
    let half = n / 2;
    let freqs: Vec<f64> = (1..=half).map(|k| k as f64 / (n as f64 * dt)).collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut power = Vec::with_capacity(d.rows() * half);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for b in 0..d.samples {
        for k in 0..d.channels {
            let x = batch.row(b, k);
            let m = mask.row(b, k);
            let filled: Vec<f64> = match fill {
                GapFill::Zero => x.iter().zip(m).map(|(&v, &on)| if on { v } else { 0.0 }).collect(),
                GapFill::Lerp => lerp_row(batch.times(b), x, m).unwrap_or_else(|| {
                    let fill = x.iter().zip(m).find(|(_, &on)| on).map_or(0.0, |(&v, _)| v);
                    vec![fill; n]
                }),
            };
            for (c, v) in buf.iter_mut().zip(&filled) {
                *c = Complex::new(*v, 0.0);
            }
            fft.process(&mut buf);
            power.extend(buf[1..=half].iter().map(|c| c.norm_sqr() / n as f64));
        }
    }
    Ok(FftSpectrum { samples: d.samples, channels: d.channels, freqs, power })
}

/// Index of the maximum, lowest index on ties. `None` for an empty or all-NaN slice.
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(j) if values[j] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Frequency at the spectral peak, lowest frequency on ties.
pub fn leading_frequency(power: &[f64], freqs: &[f64]) -> Option<f64> {
    argmax_lowest(power).map(|i| freqs[i])
}
