//! False-alarm probability under the χ²₂ noise model and the weights derived
//! from it.

use crate::error::{ensure, Result};

use super::Periodogram;

/// Offset keeping `1 / (fap + ε)` finite.
pub const FAP_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct FapAnnotation {
    pub fap: Vec<f64>,
    pub j_eff: f64,
    pub weights: Vec<f64>,
}

/// `1 − (1 − e^{−P})^{J_eff}`, evaluated through `ln_1p`/`exp_m1` so that
/// large powers keep their relative precision.
pub fn fap_value(power: f64, j_eff: f64) -> f64 {
    let p = power.max(0.0);
    let log_q = (-(-p).exp()).ln_1p();
    (-(j_eff * log_q).exp_m1()).clamp(0.0, 1.0)
}

pub fn fap_weight(power: f64, j_eff: f64) -> f64 {
    1.0 / (fap_value(power, j_eff) + FAP_EPS)
}

pub fn false_alarm_probability(p: &Periodogram, j_eff: f64) -> Result<FapAnnotation> {
    ensure!(j_eff >= 1.0 && j_eff.is_finite(), Invalid, "j_eff must be at least 1, got {j_eff}");
    let fap: Vec<f64> = p.power.iter().map(|&x| fap_value(x, j_eff)).collect();
    let weights = fap.iter().map(|f| 1.0 / (f + FAP_EPS)).collect();
    Ok(FapAnnotation { fap, j_eff, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(fap_value(0.0, 10.0), 1.0);
        assert_eq!(fap_value(1e6, 10.0), 0.0);
        assert!((fap_weight(1e6, 10.0) - 1.0 / FAP_EPS).abs() < 1e-3);
        assert!((fap_weight(0.0, 10.0) - 1.0 / (1.0 + FAP_EPS)).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_evaluation() {
        // Reference value from 30-digit arithmetic.
        let naive = 1.0 - (1.0 - (-3.0f64).exp()).powi(10);
        assert!((fap_value(3.0, 10.0) - naive).abs() < 1e-15);
        assert!((fap_value(3.0, 10.0) - 0.399_919_706_024_492_3).abs() < 1e-15);
    }

    #[test]
    fn small_tail_keeps_relative_precision() {
        // For large P the value is ≈ J·e^{−P}; the naive form underflows to 0.
        let p = 40.0;
        let got = fap_value(p, 50.0);
        let approx = 50.0 * (-p).exp();
        assert!(((got - approx) / approx).abs() < 1e-12);
    }
}
