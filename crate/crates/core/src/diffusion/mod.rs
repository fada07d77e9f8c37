//! Conditional diffusion imputation with Lomb–Scargle spectrum conditioning.

mod model;
mod sample;
mod schedule;
mod train;

pub use model::{Conditioning, DenoiserConfig, LscdModel, ModelConfig, SpectralEncoderConfig};
pub use sample::{chain_rng, sample_impute, Imputation, NoisePredictor, SampleConfig};
pub use schedule::{forward_noise, make_schedule, noise_with, NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use train::{
    consistency_loss, draw_step, finetune_spectral, read_trace, score_matching_loss, spectral_consistency, spectral_consistency_var,
    train_main, validation_losses, MaskRatio, RunFiles, StepDraw, TraceEntry, TrainConfig, TrainReport,
};
