//! Conditioning features: FAP-filtered, log-compressed periodogram power
//! standardized per `(sample, channel)` over the frequency grid.

use serde::{Deserialize, Serialize};

use super::fap::{fap_value, FapAnnotation, FAP_EPS};
use super::Periodogram;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FapFilter {
    /// Multiply power by `1 / (fap + ε)`.
    Weight,
    /// Zero every frequency whose FAP exceeds `max_fap`.
    Threshold { max_fap: f64 },
}

/// Composition of the FAP weight and the log transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterOrder {
    /// `log(1 + w·P)`
    #[default]
    WeightThenLog,
    /// `w · log(1 + P)`
    LogThenWeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub filter: FapFilter,
    pub order: FilterOrder,
    /// Effective number of independent frequencies; `None` uses the grid size.
    pub j_eff: Option<f64>,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            filter: FapFilter::Weight,
            order: FilterOrder::WeightThenLog,
            j_eff: None,
        }
    }
}

impl FeatureOptions {
    pub fn j_eff_for(&self, grid_len: usize) -> f64 {
        self.j_eff.unwrap_or(grid_len as f64).max(1.0)
    }
}

fn compress(p: f64, fap: f64, opts: &FeatureOptions) -> f64 {
    let w = 1.0 / (fap + FAP_EPS);
    match (opts.filter, opts.order) {
        (FapFilter::Threshold { max_fap }, _) => {
            if fap <= max_fap {
                p.ln_1p()
            } else {
                0.0
            }
        }
        (FapFilter::Weight, FilterOrder::WeightThenLog) => (w * p).ln_1p(),
        (FapFilter::Weight, FilterOrder::LogThenWeight) => w * p.ln_1p(),
    }
}

/// Pre-standardization feature of a single power value.
pub fn feature_value(p: f64, j_eff: f64, opts: &FeatureOptions) -> f64 {
    let p = p.max(0.0);
    compress(p, fap_value(p, j_eff), opts)
}

/// Derivative of [`feature_value`] with respect to the power.
pub fn feature_derivative(p: f64, j_eff: f64, opts: &FeatureOptions) -> f64 {
    let p = p.max(0.0);
    let fap = fap_value(p, j_eff);
    let w = 1.0 / (fap + FAP_EPS);
    // d fap / dP = −J q^{J−1} e^{−P},  q = 1 − e^{−P}
    let e = (-p).exp();
    let q = -(-p).exp_m1();
    let dfap = -j_eff * q.powf(j_eff - 1.0) * e;
    let dw = -dfap * w * w;
    match (opts.filter, opts.order) {
        (FapFilter::Threshold { max_fap }, _) => {
            if fap <= max_fap {
                1.0 / (1.0 + p)
            } else {
                0.0
            }
        }
        (FapFilter::Weight, FilterOrder::WeightThenLog) => (w + p * dw) / (1.0 + w * p),
        (FapFilter::Weight, FilterOrder::LogThenWeight) => dw * p.ln_1p() + w / (1.0 + p),
    }
}

/// Zero-mean, unit-variance (population) rows of length `row_len`. Rows with
/// no spread become all zeros. Returns the per-row standard deviation, with 0
/// marking a flat row.
pub fn standardize_rows(values: &[f64], row_len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; values.len()];
    let mut stds = Vec::with_capacity(values.len() / row_len.max(1));
    for (src, dst) in values.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let n = src.len() as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-12 * (1.0 + mean.abs()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) / std;
            }
            stds.push(std);
        } else {
            stds.push(0.0);
        }
    }
    (out, stds)
}

/// Features from a periodogram and its FAP annotation.
pub fn spectral_feature(p: &Periodogram, fap: &FapAnnotation, opts: &FeatureOptions) -> Vec<f64> {
    let compressed: Vec<f64> = p
        .power
        .iter()
        .zip(&fap.fap)
        .map(|(&pw, &f)| compress(pw.max(0.0), f, opts))
        .collect();
    standardize_rows(&compressed, p.grid.len()).0
}

/// Features straight from a `[rows, J]` power buffer.
pub fn spectral_feature_raw(power: &[f64], j: usize, opts: &FeatureOptions) -> Vec<f64> {
    let j_eff = opts.j_eff_for(j);
    let compressed: Vec<f64> = power.iter().map(|&p| feature_value(p, j_eff, opts)).collect();
    standardize_rows(&compressed, j).0
}
