//! Least-squares reference for the periodogram.
//!
//! Fits `x ≈ α₁ cos(2πft) + α₂ sin(2πft)` through the 2×2 normal equations on
//! the unshifted basis and reports half the explained sum of squares,
//! `½ ‖H θ̂‖²`. It shares no code with the closed-form path and serves as the
//! independent check on it.

use std::f64::consts::TAU;

use crate::error::{ensure, Result};

const PINV_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LsFit {
    pub alpha_cos: f64,
    pub alpha_sin: f64,
    pub amplitude: f64,
    pub power: f64,
}

/// Least-squares sinusoid fit at ordinary frequency `f`.
pub fn ls_fit(t: &[f64], x: &[f64], f: f64) -> Result<LsFit> {
    ensure!(t.len() == x.len(), Shape, "{} times for {} values", t.len(), x.len());
    ensure!(t.len() >= 2, Invalid, "least-squares fit needs at least two points");
    let w = TAU * f;
    // Normal matrix [[a, b], [b, c]] and right-hand side [r1, r2].
    let (mut a, mut b, mut c, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&ti, &xi) in t.iter().zip(x) {
        let (s, co) = (w * ti).sin_cos();
        a += co * co;
        b += co * s;
        c += s * s;
        r1 += co * xi;
        r2 += s * xi;
    }
    let (alpha_cos, alpha_sin) = pinv_solve(a, b, c, r1, r2);
    let explained: f64 = t
        .iter()
        .map(|&ti| {
            let (s, co) = (w * ti).sin_cos();
            let fit = alpha_cos * co + alpha_sin * s;
            fit * fit
        })
        .sum();
    Ok(LsFit {
        alpha_cos,
        alpha_sin,
        amplitude: alpha_cos.hypot(alpha_sin),
        power: 0.5 * explained,
    })
}

pub fn ls_oracle(t: &[f64], x: &[f64], f: f64) -> Result<f64> {
    Ok(ls_fit(t, x, f)?.power)
}

/// Solve the symmetric 2×2 system through its eigendecomposition, dropping
/// eigenvalues below `PINV_TOL` relative to the largest.
fn pinv_solve(a: f64, b: f64, c: f64, r1: f64, r2: f64) -> (f64, f64) {
    let half_tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (half_tr + disc, half_tr - disc);
    // Unit eigenvector of l1.
    let (v1x, v1y) = if b.abs() > 0.0 {
        let (x, y) = (b, l1 - a);
        let n = x.hypot(y);
        (x / n, y / n)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let (v2x, v2y) = (-v1y, v1x);
    let cutoff = PINV_TOL * l1.abs().max(f64::MIN_POSITIVE);
    let mut sol = (0.0, 0.0);
    for (l, vx, vy) in [(l1, v1x, v1y), (l2, v2x, v2y)] {
        if l.abs() > cutoff {
            let coef = (vx * r1 + vy * r2) / l;
            sol.0 += coef * vx;
            sol.1 += coef * vy;
        }
    }
    sol
}
