//! Masked, batched Lomb–Scargle periodogram.
//!
//! For each `(sample, channel)` row and each angular frequency `ω` of a
//! [`FrequencyGrid`], only the entries selected by a mask take part:
//!
//! ```text
//! τ    = atan(Σ sin 2ωs / Σ cos 2ωs) / 2ω
//! φ_i  = s_i − τ
//! P(ω) = ½ [ (Σ x̃ cos ωφ)² / Σ cos² ωφ + (Σ x̃ sin ωφ)² / Σ sin² ωφ ]
//! ```
//!
//! where `x̃ = x − x̄` when centering and `x̃ = x` otherwise. Denominators are
//! clamped at [`DENOM_FLOOR`]. The analytic vector-Jacobian product with
//! respect to the values is provided by [`periodogram_vjp`]; `τ` depends on
//! timestamps only, so it is a constant of that derivative.

mod fap;
mod feature;
pub mod oracle;

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

pub use fap::{fap_value, fap_weight, false_alarm_probability, FapAnnotation, FAP_EPS};
pub use feature::{
    feature_derivative, feature_value, spectral_feature, spectral_feature_raw, standardize_rows,
    FapFilter, FeatureOptions, FilterOrder,
};
pub use oracle::{ls_fit, ls_oracle, LsFit};

use crate::error::{ensure, Error, Result};
use crate::grid::FrequencyGrid;
use crate::split::ConditionalSplit;
use crate::types::{Dims, Mask, TimeSeriesBatch};

/// Floor applied to every denominator.
pub const DENOM_FLOOR: f64 = 1e-10;

/// Which entries of a batch feed the periodogram.
#[derive(Clone, Copy, Debug)]
pub enum MaskSelector<'a> {
    Observed,
    Condition(&'a ConditionalSplit),
    Custom(&'a Mask),
}

impl<'a> MaskSelector<'a> {
    pub fn resolve(self, batch: &'a TimeSeriesBatch) -> &'a Mask {
        match self {
            MaskSelector::Observed => batch.obs_mask(),
            MaskSelector::Condition(split) => &split.cond_mask,
            MaskSelector::Custom(mask) => mask,
        }
    }
}

/// Power `[B, K, J]` over a frequency grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Periodogram {
    pub samples: usize,
    pub channels: usize,
    pub grid: FrequencyGrid,
    pub power: Vec<f64>,
    pub tau: Vec<f64>,
    /// Per `(sample, channel)`: fewer than two points contributed.
    pub degenerate: Vec<bool>,
}

impl Periodogram {
    pub fn row(&self, b: usize, k: usize) -> &[f64] {
        let j = self.grid.len();
        let start = (b * self.channels + k) * j;
        &self.power[start..start + j]
    }

    pub fn rows(&self) -> usize {
        self.samples * self.channels
    }
}

/// Shift per row and frequency; rows without observed points get `τ = 0`.
pub fn compute_tau(
    timestamps: &[f64],
    mask: &Mask,
    grid: &FrequencyGrid,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let d = mask.dims();
    ensure!(
        timestamps.len() == d.samples * d.steps,
        Shape,
        "timestamps have {} entries, expected {}",
        timestamps.len(),
        d.samples * d.steps
    );
    let j = grid.len();
    let mut tau = vec![0.0; d.rows() * j];
    let mut degenerate = vec![false; d.rows()];
    tau.par_chunks_mut(j)
        .zip(degenerate.par_iter_mut())
        .enumerate()
        .for_each(|(row, (tau_row, degen))| {
            let (b, k) = (row / d.channels, row % d.channels);
            let t = &timestamps[b * d.steps..(b + 1) * d.steps];
            let m = mask.row(b, k);
            let times: Vec<f64> = t.iter().zip(m).filter(|(_, &on)| on).map(|(&s, _)| s).collect();
            *degen = times.is_empty();
            if times.is_empty() {
                return;
            }
            for (out, &w) in tau_row.iter_mut().zip(grid.omegas()) {
                *out = shift(&times, w);
            }
        });
    Ok((tau, degenerate))
}

#[inline]
fn shift(times: &[f64], omega: f64) -> f64 {
    let (mut s2, mut c2) = (0.0, 0.0);
    for &s in times {
        let (sn, cs) = (2.0 * omega * s).sin_cos();
        s2 += sn;
        c2 += cs;
    }
    // Principal branch; any branch orthogonalizes the basis. The denominator
    // keeps its sign when clamped away from zero.
    let c2 = if c2.abs() < DENOM_FLOOR { DENOM_FLOOR.copysign(c2) } else { c2 };
    (s2 / c2).atan() / (2.0 * omega.max(DENOM_FLOOR))
}

/// Per-frequency sums of one row that both the power and its derivative use.
struct RowTerms {
    /// Σ x̃ cos, Σ x̃ sin.
    c: f64,
    s: f64,
    /// Clamped Σ cos², Σ sin².
    cc: f64,
    ss: f64,
}

fn row_terms(
    times: &[f64],
    x: &[f64],
    omega: f64,
    tau: f64,
    center_value: f64,
) -> (RowTerms, Vec<(f64, f64)>) {
    let mut trig = Vec::with_capacity(times.len());
    let (mut c, mut s, mut cc, mut ss) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &v) in times.iter().zip(x) {
        let (sn, cs) = (omega * (t - tau)).sin_cos();
        let xv = v - center_value;
        c += xv * cs;
        s += xv * sn;
        cc += cs * cs;
        ss += sn * sn;
        trig.push((cs, sn));
    }
    let terms = RowTerms {
        c,
        s,
        cc: cc.max(DENOM_FLOOR),
        ss: ss.max(DENOM_FLOOR),
    };
    (terms, trig)
}

fn gather(t: &[f64], x: &[f64], m: &[bool]) -> (Vec<f64>, Vec<f64>) {
    t.iter()
        .zip(x)
        .zip(m)
        .filter(|(_, &on)| on)
        .map(|((&t, &x), _)| (t, x))
        .unzip()
}

fn check_raw(values: &[f64], timestamps: &[f64], mask: &Mask) -> Result<Dims> {
    let d = mask.dims();
    ensure!(values.len() == d.len(), Shape, "values have {} entries, expected {}", values.len(), d.len());
    ensure!(
        timestamps.len() == d.samples * d.steps,
        Shape,
        "timestamps have {} entries, expected {}",
        timestamps.len(),
        d.samples * d.steps
    );
    Ok(d)
}

/// Periodogram of raw buffers: `values [B,K,L]`, `timestamps [B,L]`.
pub fn periodogram_raw(
    values: &[f64],
    timestamps: &[f64],
    mask: &Mask,
    grid: &FrequencyGrid,
    center: bool,
) -> Result<Periodogram> {
    let d = check_raw(values, timestamps, mask)?;
    let j = grid.len();
    let mut power = vec![0.0; d.rows() * j];
    let mut tau = vec![0.0; d.rows() * j];
    let mut degenerate = vec![false; d.rows()];
    power
        .par_chunks_mut(j)
        .zip(tau.par_chunks_mut(j))
        .zip(degenerate.par_iter_mut())
        .enumerate()
        .for_each(|(row, ((p_row, tau_row), degen))| {
            let (b, k) = (row / d.channels, row % d.channels);
            let (times, x) = gather(
                &timestamps[b * d.steps..(b + 1) * d.steps],
                &values[d.row(b, k)],
                mask.row(b, k),
            );
            if times.is_empty() {
                *degen = true;
                return;
            }
            for (tau_out, &w) in tau_row.iter_mut().zip(grid.omegas()) {
                *tau_out = shift(&times, w);
            }
            if times.len() < 2 {
                *degen = true;
                return;
            }
            let mean = if center { x.iter().sum::<f64>() / x.len() as f64 } else { 0.0 };
            for ((p, &tau), &w) in p_row.iter_mut().zip(tau_row.iter()).zip(grid.omegas()) {
                let (rt, _) = row_terms(&times, &x, w, tau, mean);
                *p = 0.5 * (rt.c * rt.c / rt.cc + rt.s * rt.s / rt.ss);
            }
        });
    Ok(Periodogram {
        samples: d.samples,
        channels: d.channels,
        grid: grid.clone(),
        power,
        tau,
        degenerate,
    })
}

/// Periodogram of `batch` over the entries picked by `selector`.
pub fn periodogram(
    batch: &TimeSeriesBatch,
    selector: MaskSelector<'_>,
    grid: &FrequencyGrid,
    center: bool,
) -> Result<Periodogram> {
    let mask = selector.resolve(batch);
    ensure!(mask.dims() == batch.dims(), Shape, "mask does not match batch");
    periodogram_raw(batch.values(), batch.timestamps(), mask, grid, center)
}

/// `∂⟨upstream, P⟩ / ∂values`, zero at masked-out entries and degenerate rows.
pub fn periodogram_vjp_raw(
    values: &[f64],
    timestamps: &[f64],
    mask: &Mask,
    grid: &FrequencyGrid,
    center: bool,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let d = check_raw(values, timestamps, mask)?;
    let j = grid.len();
    ensure!(
        upstream.len() == d.rows() * j,
        Shape,
        "upstream has {} entries, expected {}",
        upstream.len(),
        d.rows() * j
    );
    let mut grad = vec![0.0; d.len()];
    grad.par_chunks_mut(d.steps).enumerate().for_each(|(row, g_row)| {
        let (b, k) = (row / d.channels, row % d.channels);
        let m = mask.row(b, k);
        let (times, x) = gather(&timestamps[b * d.steps..(b + 1) * d.steps], &values[d.row(b, k)], m);
        let n = times.len();
        if n < 2 {
            return;
        }
        let mean = if center { x.iter().sum::<f64>() / n as f64 } else { 0.0 };
        let mut acc = vec![0.0; n];
        for (&w, &u) in grid.omegas().iter().zip(&upstream[row * j..(row + 1) * j]) {
            if u == 0.0 {
                continue;
            }
            let (rt, trig) = row_terms(&times, &x, w, shift(&times, w), mean);
            let a = u * rt.c / rt.cc;
            let bcoef = u * rt.s / rt.ss;
            let (cbar, sbar) = if center {
                let (sc, ss) = trig.iter().fold((0.0, 0.0), |(a, b), &(c, s)| (a + c, b + s));
                (sc / n as f64, ss / n as f64)
            } else {
                (0.0, 0.0)
            };
            for (g, &(c, s)) in acc.iter_mut().zip(&trig) {
                *g += a * (c - cbar) + bcoef * (s - sbar);
            }
        }
        let mut it = acc.into_iter();
        for (g, &on) in g_row.iter_mut().zip(m) {
            if on {
                *g = it.next().expect("one gradient per observed entry");
            }
        }
    });
    Ok(grad)
}

pub fn periodogram_vjp(
    batch: &TimeSeriesBatch,
    selector: MaskSelector<'_>,
    grid: &FrequencyGrid,
    center: bool,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let mask = selector.resolve(batch);
    periodogram_vjp_raw(batch.values(), batch.timestamps(), mask, grid, center, upstream)
}

#[derive(Serialize)]
struct PsdRecord {
    sample: usize,
    channel: usize,
    omega: f64,
    power: f64,
    fap: f64,
}

/// Rows of `(sample, channel, omega, power, fap)`.
pub fn write_periodogram_csv(path: &Path, p: &Periodogram, fap: &FapAnnotation) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let j = p.grid.len();
    for row in 0..p.rows() {
        for (jj, &omega) in p.grid.omegas().iter().enumerate() {
            w.serialize(PsdRecord {
                sample: row / p.channels,
                channel: row % p.channels,
                omega,
                power: p.power[row * j + jj],
                fap: fap.fap[row * j + jj],
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn periodogram_to_json(p: &Periodogram, fap: &FapAnnotation) -> serde_json::Value {
    let j = p.grid.len();
    let nest = |flat: &[f64]| -> Vec<Vec<Vec<f64>>> {
        (0..p.samples)
            .map(|b| {
                (0..p.channels)
                    .map(|k| flat[(b * p.channels + k) * j..(b * p.channels + k + 1) * j].to_vec())
                    .collect()
            })
            .collect()
    };
    serde_json::json!({
        "omegas": p.grid.omegas(),
        "frequencies_hz": p.grid.omegas().iter().map(|w| w / TAU).collect::<Vec<_>>(),
        "power": nest(&p.power),
        "tau": nest(&p.tau),
        "fap": nest(&fap.fap),
        "weights": nest(&fap.weights),
        "j_eff": fap.j_eff,
        "degenerate": p.degenerate,
    })
}

pub fn write_periodogram_json(path: &Path, p: &Periodogram, fap: &FapAnnotation) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(&mut f, &periodogram_to_json(p, fap))?;
    f.flush().map_err(|e| Error::io(path, e))
}
