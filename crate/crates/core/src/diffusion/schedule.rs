use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `β_t = (√β_min + (t−1)/(T−1)·(√β_max − √β_min))²`
    #[default]
    Quadratic,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 50, kind: ScheduleKind::Quadratic, beta_min: 1e-4, beta_max: 0.5 }
    }
}

/// Variance schedule `β_1..β_T` with cumulative products `α_t = Π (1 − β_i)`.
/// Step `t` is 1-based; index `t − 1` into the vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cum: Vec<f64>,
}

pub fn make_schedule(cfg: &ScheduleConfig) -> Result<NoiseSchedule> {
    let ScheduleConfig { steps, kind, beta_min, beta_max } = *cfg;
    ensure!(steps >= 1, Invalid, "schedule needs at least one step");
    ensure!(
        beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max,
        Invalid,
        "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
    );
    let frac = |t: usize| if steps == 1 { 0.0 } else { t as f64 / (steps - 1) as f64 };
    let betas: Vec<f64> = (0..steps)
        .map(|t| match kind {
            ScheduleKind::Quadratic => {
                let (a, b) = (beta_min.sqrt(), beta_max.sqrt());
                (a + frac(t) * (b - a)).powi(2)
            }
            ScheduleKind::Linear => beta_min + frac(t) * (beta_max - beta_min),
        })
        .collect();
    let mut alphas_cum = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &b in &betas {
        acc *= 1.0 - b;
        alphas_cum.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas_cum })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_cum(&self, t: usize) -> f64 {
        self.alphas_cum[t - 1]
    }

    /// Reverse-step variance: `(1 − α_{t−1}) / (1 − α_t) · β_t`, and `β_1` at `t = 1`.
    pub fn sigma2(&self, t: usize) -> f64 {
        if t == 1 {
            self.betas[0]
        } else {
            (1.0 - self.alpha_cum(t - 1)) / (1.0 - self.alpha_cum(t)) * self.beta(t)
        }
    }

    /// Coefficients `(a, b)` of the reverse mean `a · (x_t − b · ε̂)`.
    pub fn reverse_coefficients(&self, t: usize) -> (f64, f64) {
        let beta = self.beta(t);
        (1.0 / (1.0 - beta).sqrt(), beta / (1.0 - self.alpha_cum(t)).sqrt())
    }
}

/// `x_t = √α_t x₀ + √(1 − α_t) ε` on the entries where `mask` is set; other
/// entries keep `x₀` and get `ε = 0`.
pub fn forward_noise(x0: &[f64], mask: &[bool], t: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = mask.iter().map(|&m| if m { StandardNormal.sample(rng) } else { 0.0 }).collect();
    let xt = noise_with(x0, mask, &eps, t, schedule);
    (xt, eps)
}

/// Deterministic part of [`forward_noise`] for a given `ε`.
pub fn noise_with(x0: &[f64], mask: &[bool], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let a = schedule.alpha_cum(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    x0.iter()
        .zip(eps)
        .zip(mask)
        .map(|((&x, &e), &m)| if m { sa * x + sb * e } else { x })
        .collect()
}
