//! Shared inputs for the benchmarks.

use rand::Rng as _;

use lscd::diffusion::{DenoiserConfig, LscdModel, ModelConfig, SpectralEncoderConfig};
use lscd::rng::seeded;
use lscd::synth::{default_channel_specs, generate_sines, SinesConfig};
use lscd::{Dims, FrequencyGrid, Mask, TimeSeriesBatch};

/// Sines batch with `keep` of its entries observed.
pub fn sines_batch(samples: usize, steps: usize, keep: f64, seed: u64) -> TimeSeriesBatch {
    let cfg = SinesConfig { n_samples: samples, steps, seed, ..Default::default() };
    let batch = generate_sines(&cfg).expect("valid config").batch;
    let d: Dims = batch.dims();
    let mut rng = seeded(seed + 1);
    let bits = (0..d.len()).map(|_| rng.random_bool(keep)).collect();
    let batch = batch.with_mask(Mask::from_bits(d, bits).expect("shape")).expect("shape");
    batch.zero_unobserved()
}

pub fn default_grid(batch: &TimeSeriesBatch) -> FrequencyGrid {
    FrequencyGrid::default_for(batch).expect("regular timestamps")
}

/// Desk-scale model over the five default channels.
pub fn desk_model(batch: &TimeSeriesBatch, width: usize) -> LscdModel {
    let config = ModelConfig {
        denoiser: DenoiserConfig { channels: width, d_ff: width, ..Default::default() },
        encoder: Some(SpectralEncoderConfig { d_model: width, d_ff: width, freq_depth: 1, feature_depth: 1, ..Default::default() }),
        ..Default::default()
    };
    assert_eq!(batch.dims().channels, default_channel_specs().len());
    LscdModel::for_batch(&config, batch, default_grid(batch), 0).expect("valid model")
}
