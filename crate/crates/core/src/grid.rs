use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::types::TimeSeriesBatch;

/// Strictly increasing, positive angular frequencies (radians per time unit).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FrequencyGrid {
    omegas: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(omegas: Vec<f64>) -> Result<Self> {
        ensure!(!omegas.is_empty(), Invalid, "frequency grid is empty");
        if omegas.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("frequency grid".into()));
        }
        ensure!(omegas[0] > 0.0, Invalid, "frequencies must be positive");
        ensure!(
            omegas.windows(2).all(|w| w[0] < w[1]),
            Invalid,
            "frequencies must be strictly increasing"
        );
        Ok(Self { omegas })
    }

    /// `j` ordinary frequencies evenly spaced over `[f_min, f_max]`.
    pub fn linear_hz(j: usize, f_min: f64, f_max: f64) -> Result<Self> {
        ensure!(j >= 1, Invalid, "grid needs at least one frequency");
        ensure!(j == 1 || f_max > f_min, Invalid, "f_max must exceed f_min");
        let omegas = (0..j)
            .map(|i| {
                let f = if j == 1 {
                    f_min
                } else {
                    f_min + (f_max - f_min) * i as f64 / (j - 1) as f64
                };
                TAU * f
            })
            .collect();
        Self::new(omegas)
    }

    /// `j` frequencies `f_i = i · f_nyq / j`, `i = 1..=j`, with the Nyquist
    /// frequency taken from the sampling interval `dt`.
    pub fn up_to_nyquist(j: usize, dt: f64) -> Result<Self> {
        ensure!(dt > 0.0 && dt.is_finite(), Invalid, "sampling interval must be positive");
        ensure!(j >= 1, Invalid, "grid needs at least one frequency");
        let f_nyq = 0.5 / dt;
        Self::new((1..=j).map(|i| TAU * f_nyq * i as f64 / j as f64).collect())
    }

    /// `L/2` frequencies up to the Nyquist frequency of the median spacing.
    pub fn default_for(batch: &TimeSeriesBatch) -> Result<Self> {
        let dt = batch
            .median_spacing()
            .ok_or_else(|| Error::Invalid("cannot derive a grid from a single time step".into()))?;
        Self::up_to_nyquist((batch.dims().steps / 2).max(1), dt)
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }

    pub fn frequencies_hz(&self) -> Vec<f64> {
        self.omegas.iter().map(|w| w / TAU).collect()
    }
}

impl TryFrom<Vec<f64>> for FrequencyGrid {
    type Error = Error;

    fn try_from(omegas: Vec<f64>) -> Result<Self> {
        Self::new(omegas)
    }
}

impl From<FrequencyGrid> for Vec<f64> {
    fn from(g: FrequencyGrid) -> Self {
        g.omegas
    }
}

/// Grid as written in experiment configs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    /// Explicit angular frequencies.
    Explicit { omegas: Vec<f64> },
    /// `j` frequencies in Hz over `[f_min, f_max]`.
    Linear { j: usize, f_min: f64, f_max: f64 },
    /// `L/2` frequencies up to Nyquist, derived from the data.
    #[default]
    Auto,
}

impl GridSpec {
    pub fn resolve(&self, batch: &TimeSeriesBatch) -> Result<FrequencyGrid> {
        match self {
            GridSpec::Explicit { omegas } => FrequencyGrid::new(omegas.clone()),
            GridSpec::Linear { j, f_min, f_max } => FrequencyGrid::linear_hz(*j, *f_min, *f_max),
            GridSpec::Auto => FrequencyGrid::default_for(batch),
        }
    }
}
