//! Lomb–Scargle conditioned diffusion imputation for irregularly sampled
//! multivariate time series, with the spectral tools, missingness
//! generators, baselines and metrics around it.

pub mod alloc;
pub mod autodiff;
pub mod baselines;
pub mod compare;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod lombscargle;
pub mod manifest;
pub mod metrics;
pub mod missingness;
pub mod normalize;
pub mod report;
pub mod rng;
pub mod spectrum;
pub mod split;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use grid::{FrequencyGrid, GridSpec};
pub use normalize::NormalizationStats;
pub use split::{ConditionalSplit, SplitStrategy};
pub use types::{Dims, Mask, TimeSeriesBatch};
