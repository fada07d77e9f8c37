//! Mean and linear-interpolation imputers.
//!
//! Both return a full `[B, K, L]` buffer: condition entries are copied
//! through, every other entry is filled.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::split::ConditionalSplit;
use crate::types::{Mask, TimeSeriesBatch};

/// Per-channel fallback when a `(sample, channel)` row has no condition
/// entries: the channel mean over all condition entries in the batch, or 0.
fn channel_fallbacks(batch: &TimeSeriesBatch, cond: &Mask) -> Vec<f64> {
    let d = batch.dims();
    (0..d.channels)
        .map(|k| {
            let (mut sum, mut n) = (0.0, 0usize);
            for b in 0..d.samples {
                for (&v, &m) in batch.row(b, k).iter().zip(cond.row(b, k)) {
                    if m {
                        sum += v;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect()
}

fn check(batch: &TimeSeriesBatch, split: &ConditionalSplit) -> Result<()> {
    ensure!(split.cond_mask.dims() == batch.dims(), Shape, "split does not match batch");
    Ok(())
}

fn row_mean(x: &[f64], m: &[bool]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (&v, &on) in x.iter().zip(m) {
        if on {
            sum += v;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Linear interpolation of the masked points of `x` over `times`, constant
/// beyond the first and last point. `None` with fewer than two points.
pub fn lerp_row(times: &[f64], x: &[f64], m: &[bool]) -> Option<Vec<f64>> {
    let idx: Vec<usize> = (0..x.len()).filter(|&i| m[i]).collect();
    if idx.len() < 2 {
        return None;
    }
    let mut out = vec![0.0; x.len()];
    let mut seg = 0;
    for (l, o) in out.iter_mut().enumerate() {
        if m[l] {
            *o = x[l];
            continue;
        }
        if l < idx[0] {
            *o = x[idx[0]];
            continue;
        }
        if l > idx[idx.len() - 1] {
            *o = x[idx[idx.len() - 1]];
            continue;
        }
        while idx[seg + 1] < l {
            seg += 1;
        }
        let (i0, i1) = (idx[seg], idx[seg + 1]);
        let w = (times[l] - times[i0]) / (times[i1] - times[i0]);
        *o = x[i0] + w * (x[i1] - x[i0]);
    }
    Some(out)
}

fn impute_rows(
    batch: &TimeSeriesBatch,
    split: &ConditionalSplit,
    fill: impl Fn(&[f64], &[f64], &[bool]) -> Option<Vec<f64>> + Sync,
) -> Result<Vec<f64>> {
    check(batch, split)?;
    let d = batch.dims();
    let cond = &split.cond_mask;
    let fallback = channel_fallbacks(batch, cond);
    let mut out = vec![0.0; d.len()];
    out.par_chunks_mut(d.steps.max(1)).enumerate().for_each(|(row, dst)| {
        let (b, k) = (row / d.channels, row % d.channels);
        let x = batch.row(b, k);
        let m = cond.row(b, k);
        let filled = fill(batch.times(b), x, m).unwrap_or_else(|| {
            let v = row_mean(x, m).unwrap_or(fallback[k]);
            x.iter().zip(m).map(|(&xi, &on)| if on { xi } else { v }).collect()
        });
        dst.copy_from_slice(&filled);
    });
    Ok(out)
}

/// Fill every non-condition entry with the mean of its row's condition entries.
pub fn impute_mean(batch: &TimeSeriesBatch, split: &ConditionalSplit) -> Result<Vec<f64>> {
    impute_rows(batch, split, |_, _, _| None)
}

/// Linear interpolation in time between neighbouring condition entries.
pub fn impute_lerp(batch: &TimeSeriesBatch, split: &ConditionalSplit) -> Result<Vec<f64>> {
    impute_rows(batch, split, lerp_row)
}
