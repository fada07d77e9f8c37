//! Multichannel noisy sine mixtures with Beta-distributed frequencies.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::derived;
use crate::types::{Dims, TimeSeriesBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineChannelSpec {
    pub mean_freqs: Vec<f64>,
    pub widths: Vec<f64>,
    pub amplitudes: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
}

fn default_sigma() -> f64 {
    0.1
}

impl SineChannelSpec {
    pub fn new(mean_freqs: &[f64], widths: &[f64], amplitudes: &[f64]) -> Self {
        Self {
            mean_freqs: mean_freqs.to_vec(),
            widths: widths.to_vec(),
            amplitudes: amplitudes.to_vec(),
            noise_sigma: default_sigma(),
        }
    }

    pub fn n_components(&self) -> usize {
        self.mean_freqs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean_freqs.len();
        ensure!(n >= 1, Invalid, "a channel needs at least one component");
        ensure!(
            self.widths.len() == n && self.amplitudes.len() == n,
            Invalid,
            "component lists disagree in length"
        );
        for ((&mu, &w), &a) in self.mean_freqs.iter().zip(&self.widths).zip(&self.amplitudes) {
            ensure!(w > 0.0 && w.is_finite(), Invalid, "frequency width {w} must be positive");
            // Beta(2,2) never hits its endpoints, so a zero lower bound still
            // yields positive frequencies.
            ensure!(mu - w / 2.0 >= 0.0, Invalid, "frequency range around {mu} reaches below zero");
            ensure!(a.is_finite(), Invalid, "amplitude {a} is not finite");
        }
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            Invalid,
            "noise sigma must be non-negative"
        );
        Ok(())
    }

    /// Index of the component with the largest amplitude (first on ties).
    pub fn leading_component(&self) -> usize {
        let mut best = 0;
        for (i, a) in self.amplitudes.iter().enumerate() {
            if a.abs() > self.amplitudes[best].abs() {
                best = i;
            }
        }
        best
    }
}

/// The five-channel configuration used throughout the synthetic experiments.
pub fn default_channel_specs() -> Vec<SineChannelSpec> {
    vec![
        SineChannelSpec::new(&[1.0], &[1.0], &[1.0]),
        SineChannelSpec::new(&[1.0, 2.0], &[1.0, 1.5], &[0.5, 1.0]),
        SineChannelSpec::new(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.5], &[0.5, 1.0, 1.5]),
        SineChannelSpec::new(&[0.5, 1.0, 1.5, 2.0], &[1.0, 1.0, 1.0, 2.0], &[0.8, 1.2, 1.5, 2.0]),
        SineChannelSpec::new(&[0.5, 1.0, 2.0, 3.0, 4.0], &[0.5, 1.0, 1.0, 1.5, 2.0], &[1.0, 1.5, 2.0, 2.5, 3.0]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinesConfig {
    pub n_samples: usize,
    pub steps: usize,
    pub horizon: f64,
    pub channels: Vec<SineChannelSpec>,
    /// Timestamp jitter as a fraction of the step (`< 0.5`); 0 gives a uniform grid.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SinesConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            steps: 100,
            horizon: 10.0,
            channels: default_channel_specs(),
            jitter: 0.0,
            seed: 0,
        }
    }
}

impl SinesConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_samples >= 1, Invalid, "need at least one sample");
        ensure!(self.steps >= 2, Invalid, "need at least two steps");
        ensure!(self.horizon > 0.0 && self.horizon.is_finite(), Invalid, "horizon must be positive");
        ensure!(!self.channels.is_empty(), Invalid, "need at least one channel");
        ensure!((0.0..0.5).contains(&self.jitter), Invalid, "jitter must lie in [0, 0.5)");
        self.channels.iter().try_for_each(SineChannelSpec::validate)
    }
}

/// Per-sample draws behind a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `[sample][channel][component]` frequencies in Hz.
    pub freqs: Vec<Vec<Vec<f64>>>,
    /// `[sample][channel][component]` phases.
    pub phases: Vec<Vec<Vec<f64>>>,
    /// `[channel][component]` amplitudes.
    pub amplitudes: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Frequency of the largest-amplitude component of `(b, k)`.
    pub fn leading_frequency(&self, b: usize, k: usize) -> f64 {
        let amps = &self.amplitudes[k];
        let mut best = 0;
        for (i, a) in amps.iter().enumerate() {
            if a.abs() > amps[best].abs() {
                best = i;
            }
        }
        self.freqs[b][k][best]
    }

    pub fn select_samples(&self, samples: &[usize]) -> Self {
        Self {
            freqs: samples.iter().map(|&b| self.freqs[b].clone()).collect(),
            phases: samples.iter().map(|&b| self.phases[b].clone()).collect(),
            amplitudes: self.amplitudes.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SinesDataset {
    pub batch: TimeSeriesBatch,
    pub truth: GroundTruth,
}

/// `Σ a sin(2π f t + φ)` at each time.
pub fn sine_sum(times: &[f64], freqs: &[f64], amplitudes: &[f64], phases: &[f64]) -> Vec<f64> {
    times
        .iter()
        .map(|&t| {
            freqs
                .iter()
                .zip(amplitudes)
                .zip(phases)
                .map(|((&f, &a), &p)| a * (TAU * f * t + p).sin())
                .sum()
        })
        .collect()
}

struct SampleDraw {
    times: Vec<f64>,
    values: Vec<f64>,
    freqs: Vec<Vec<f64>>,
    phases: Vec<Vec<f64>>,
}

fn draw_sample(cfg: &SinesConfig, b: usize) -> SampleDraw {
    let mut rng = derived(cfg.seed, b as u64);
    let beta = Beta::new(2.0, 2.0).expect("valid beta parameters");
    let dt = cfg.horizon / (cfg.steps - 1) as f64;
    let times: Vec<f64> = (0..cfg.steps)
        .map(|l| {
            let base = l as f64 * cfg.horizon / (cfg.steps - 1) as f64;
            if cfg.jitter > 0.0 {
                base + rng.random_range(-cfg.jitter..cfg.jitter) * dt
            } else {
                base
            }
        })
        .collect();
    let mut values = Vec::with_capacity(cfg.channels.len() * cfg.steps);
    let mut freqs = Vec::with_capacity(cfg.channels.len());
    let mut phases = Vec::with_capacity(cfg.channels.len());
    for spec in &cfg.channels {
        let f: Vec<f64> = spec
            .mean_freqs
            .iter()
            .zip(&spec.widths)
            .map(|(&mu, &w)| beta.sample(&mut rng) * w + (mu - w / 2.0))
            .collect();
        let ph: Vec<f64> = (0..f.len()).map(|_| rng.random_range(0.0..TAU)).collect();
        let clean = sine_sum(&times, &f, &spec.amplitudes, &ph);
        if spec.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, spec.noise_sigma).expect("valid noise sigma");
            values.extend(clean.into_iter().map(|v| v + noise.sample(&mut rng)));
        } else {
            values.extend(clean);
        }
        freqs.push(f);
        phases.push(ph);
    }
    SampleDraw { times, values, freqs, phases }
}

pub fn generate_sines(cfg: &SinesConfig) -> Result<SinesDataset> {
    cfg.validate()?;
    let draws: Vec<SampleDraw> = (0..cfg.n_samples).into_par_iter().map(|b| draw_sample(cfg, b)).collect();
    let dims = Dims::new(cfg.n_samples, cfg.channels.len(), cfg.steps);
    let mut values = Vec::with_capacity(dims.len());
    let mut timestamps = Vec::with_capacity(cfg.n_samples * cfg.steps);
    let mut freqs = Vec::with_capacity(cfg.n_samples);
    let mut phases = Vec::with_capacity(cfg.n_samples);
    for d in draws {
        values.extend(d.values);
        timestamps.extend(d.times);
        freqs.push(d.freqs);
        phases.push(d.phases);
    }
    Ok(SinesDataset {
        batch: TimeSeriesBatch::observed(dims, values, timestamps)?,
        truth: GroundTruth {
            freqs,
            phases,
            amplitudes: cfg.channels.iter().map(|c| c.amplitudes.clone()).collect(),
        },
    })
}
