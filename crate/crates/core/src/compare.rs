//! Spectral comparisons between estimators and imputations: leading
//! frequencies, their histograms, and periodogram-difference curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::io::write_json;
use crate::grid::FrequencyGrid;
use crate::lombscargle::{periodogram, MaskSelector};
use crate::spectrum::{argmax_lowest, fft_psd_with_fill, GapFill};
use crate::synth::GroundTruth;
use crate::types::{Mask, TimeSeriesBatch};

/// Leading frequency of one `(sample, channel)` row under each estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadingRow {
    pub sample: usize,
    pub channel: usize,
    pub truth_hz: f64,
    /// Lomb–Scargle on the observed entries only.
    pub ls_hz: Option<f64>,
    /// FFT of the series with gaps filled by linear interpolation.
    pub fft_hz: Option<f64>,
}

impl LeadingRow {
    pub fn ls_error(&self) -> Option<f64> {
        self.ls_hz.map(|f| (f - self.truth_hz).abs())
    }

    pub fn fft_error(&self) -> Option<f64> {
        self.fft_hz.map(|f| (f - self.truth_hz).abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadingSummary {
    pub rows: usize,
    pub ls_mean_error: f64,
    pub fft_mean_error: f64,
    /// Share of rows where the LS error is strictly below the FFT error.
    pub ls_strictly_better: f64,
}

/// Leading frequencies of the masked data under LS and FFT+lerp against the
/// frequency of each row's largest generating component.
pub fn leading_frequencies(
    masked: &TimeSeriesBatch,
    truth: &GroundTruth,
    samples: &[usize],
    grid: &FrequencyGrid,
) -> Result<Vec<LeadingRow>> {
    let d = masked.dims();
    ensure!(truth.freqs.len() == samples.len(), Shape, "ground truth covers {} samples, expected {}", truth.freqs.len(), samples.len());
    let ls = periodogram(masked, MaskSelector::Observed, grid, true)?;
    let fft = fft_psd_with_fill(masked, masked.obs_mask(), GapFill::Lerp)?;
    let ls_freqs = grid.frequencies_hz();
    let mut out = Vec::with_capacity(d.rows());
    for (b, &sample) in samples.iter().enumerate() {
        for k in 0..d.channels {
            let pick = |power: &[f64], freqs: &[f64]| {
                argmax_lowest(power).filter(|&i| power[i] > 0.0).map(|i| freqs[i])
            };
            let ls_hz = if ls.degenerate[b * d.channels + k] { None } else { pick(ls.row(b, k), &ls_freqs) };
            out.push(LeadingRow {
                sample,
                channel: k,
                truth_hz: truth.leading_frequency(b, k),
                ls_hz,
                fft_hz: pick(fft.row(b, k), &fft.freqs),
            });
        }
    }
    Ok(out)
}

/// Rows lacking either estimate count as LS losses.
pub fn summarize(rows: &[LeadingRow]) -> LeadingSummary {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&LeadingRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
    };
    let better = rows
        .iter()
        .filter(|r| matches!((r.ls_error(), r.fft_error()), (Some(a), Some(b)) if a < b))
        .count();
    LeadingSummary {
        rows: rows.len(),
        ls_mean_error: mean(&LeadingRow::ls_error),
        fft_mean_error: mean(&LeadingRow::fft_error),
        ls_strictly_better: better as f64 / n,
    }
}

/// Counts over `bins` equal-width bins on `[lo, hi]`; values outside are
/// clamped into the edge bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    if bins == 0 || !(hi > lo) {
        return counts;
    }
    for &v in values.iter().filter(|v| v.is_finite()) {
        let i = ((v - lo) / (hi - lo) * bins as f64).floor();
        counts[(i.max(0.0) as usize).min(bins - 1)] += 1;
    }
    counts
}

/// Mean and standard deviation over rows of the difference between
/// sum-normalized LS spectra, per grid frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdDifference {
    pub frequency_hz: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub rows: usize,
}

/// `normalize(LS(estimate)) − normalize(LS(truth))`, both over the truth's
/// observed entries unless `estimate_mask` restricts the estimate.
pub fn psd_difference(
    truth: &TimeSeriesBatch,
    estimate: &[f64],
    estimate_mask: Option<&Mask>,
    grid: &FrequencyGrid,
) -> Result<PsdDifference> {
    let d = truth.dims();
    ensure!(estimate.len() == d.len(), Shape, "estimate has {} entries, expected {}", estimate.len(), d.len());
    let est_batch = truth.with_values(estimate.to_vec())?;
    let pt = periodogram(truth, MaskSelector::Observed, grid, true)?;
    let mask = estimate_mask.unwrap_or(truth.obs_mask());
    let pe = periodogram(&est_batch, MaskSelector::Custom(mask), grid, true)?;
    let j = grid.len();
    let mut diffs: Vec<Vec<f64>> = Vec::new();
    for b in 0..d.samples {
        for k in 0..d.channels {
            let (a, e) = (pt.row(b, k), pe.row(b, k));
            let (sa, se) = (a.iter().sum::<f64>(), e.iter().sum::<f64>());
            if sa > 0.0 && se > 0.0 && sa.is_finite() && se.is_finite() {
                diffs.push(a.iter().zip(e).map(|(x, y)| y / se - x / sa).collect());
            }
        }
    }
    ensure!(!diffs.is_empty(), UndefinedMetric, "no row has a usable periodogram");
    let n = diffs.len() as f64;
    let mean: Vec<f64> = (0..j).map(|i| diffs.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let std = (0..j)
        .map(|i| {
            let v = diffs.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>();
            if diffs.len() > 1 { (v / (n - 1.0)).sqrt() } else { 0.0 }
        })
        .collect();
    Ok(PsdDifference { frequency_hz: grid.frequencies_hz(), mean, std, rows: diffs.len() })
}

/// An imputation to compare, covering the listed dataset samples.
pub struct Candidate {
    pub name: String,
    pub samples: Vec<usize>,
    pub values: Vec<f64>,
}

/// Writes `leading_frequency.csv`, `leading_frequency_hist.csv`,
/// `psd_difference.csv` and `compare_summary.json` into `dir`.
pub fn write_comparison(
    dir: &Path,
    truth: &TimeSeriesBatch,
    generating: &GroundTruth,
    masked: &TimeSeriesBatch,
    candidates: &[Candidate],
    grid: &FrequencyGrid,
    bins: usize,
) -> Result<LeadingSummary> {
    ensure!(truth.dims() == masked.dims(), Shape, "truth {:?} and masked data {:?} differ", truth.dims(), masked.dims());
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let all: Vec<usize> = (0..truth.dims().samples).collect();
    let leading = leading_frequencies(masked, generating, &all, grid)?;
    let summary = summarize(&leading);

    let path = dir.join("leading_frequency.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &leading {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let freqs = grid.frequencies_hz();
    let hi = freqs.last().copied().unwrap_or(1.0);
    let mut series: Vec<(String, Vec<f64>)> = vec![
        ("truth".into(), leading.iter().map(|r| r.truth_hz).collect()),
        ("LS (observed)".into(), leading.iter().filter_map(|r| r.ls_hz).collect()),
        ("FFT+Lerp".into(), leading.iter().filter_map(|r| r.fft_hz).collect()),
    ];
    let observed_values = truth.values().to_vec();
    let mut curves = vec![("LS (observed)".to_string(), psd_difference(truth, &observed_values, Some(masked.obs_mask()), grid)?)];
    for c in candidates {
        let t = truth.select_samples(&c.samples);
        let p = periodogram(&t.with_values(c.values.clone())?, MaskSelector::Observed, grid, true)?;
        let peaks = (0..p.rows())
            .filter_map(|r| {
                let row = &p.power[r * grid.len()..(r + 1) * grid.len()];
                argmax_lowest(row).filter(|&i| row[i] > 0.0).map(|i| freqs[i])
            })
            .collect();
        series.push((c.name.clone(), peaks));
        curves.push((c.name.clone(), psd_difference(&t, &c.values, None, grid)?));
    }

    let path = dir.join("leading_frequency_hist.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["estimator", "bin_lo_hz", "bin_hi_hz", "count"])?;
    let width = hi / bins.max(1) as f64;
    for (name, values) in &series {
        for (i, n) in histogram(values, 0.0, hi, bins).into_iter().enumerate() {
            let (lo, up) = (i as f64 * width, (i + 1) as f64 * width);
            w.write_record([name.as_str(), &lo.to_string(), &up.to_string(), &n.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("psd_difference.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["estimator", "frequency_hz", "mean", "std", "rows"])?;
    for (name, c) in &curves {
        for i in 0..c.frequency_hz.len() {
            w.write_record([
                name.as_str(),
                &c.frequency_hz[i].to_string(),
                &c.mean[i].to_string(),
                &c.std[i].to_string(),
                &c.rows.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_json(&dir.join("compare_summary.json"), &summary)?;
    Ok(summary)
}
