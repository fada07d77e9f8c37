//! Time- and frequency-domain imputation metrics.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::FrequencyGrid;
use crate::lombscargle::periodogram_raw;
use crate::spectrum::argmax_lowest;
use crate::split::ConditionalSplit;
use crate::types::{Mask, TimeSeriesBatch};

fn check_pred(truth: &TimeSeriesBatch, pred: &[f64]) -> Result<()> {
    ensure!(
        pred.len() == truth.dims().len(),
        Shape,
        "prediction has {} entries, expected {}",
        pred.len(),
        truth.dims().len()
    );
    Ok(())
}

fn target_errors<'a>(
    truth: &'a TimeSeriesBatch,
    pred: &'a [f64],
    target: &'a Mask,
) -> impl Iterator<Item = f64> + 'a {
    truth
        .values()
        .iter()
        .zip(pred)
        .zip(target.bits())
        .filter(|(_, &m)| m)
        .map(|((&x, &p), _)| x - p)
}

/// Mean absolute error over the target entries.
pub fn mae(truth: &TimeSeriesBatch, pred: &[f64], split: &ConditionalSplit) -> Result<f64> {
    check_pred(truth, pred)?;
    let (sum, n) = target_errors(truth, pred, &split.target_mask).fold((0.0, 0usize), |(s, n), e| (s + e.abs(), n + 1));
    ensure!(n > 0, UndefinedMetric, "MAE over zero target entries");
    Ok(sum / n as f64)
}

/// Root mean squared error over the target entries.
pub fn rmse(truth: &TimeSeriesBatch, pred: &[f64], split: &ConditionalSplit) -> Result<f64> {
    check_pred(truth, pred)?;
    let (sum, n) = target_errors(truth, pred, &split.target_mask).fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    ensure!(n > 0, UndefinedMetric, "RMSE over zero target entries");
    Ok((sum / n as f64).sqrt())
}

/// Frequency-domain comparison of truth and prediction over the observed entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralScores {
    pub s_mae: f64,
    /// Leading-frequency error in Hz.
    pub lfe: f64,
    pub per_channel_s_mae: Vec<Option<f64>>,
    pub per_channel_lfe: Vec<Option<f64>>,
    pub rows_used: usize,
    pub rows_skipped: usize,
}

/// Centered periodograms of truth and prediction on the truth's observed
/// entries, each normalized to unit sum per `(sample, channel)`. Rows where
/// either periodogram carries no power are skipped.
pub fn spectral_scores(truth: &TimeSeriesBatch, pred: &[f64], grid: &FrequencyGrid) -> Result<SpectralScores> {
    check_pred(truth, pred)?;
    let d = truth.dims();
    let mask = truth.obs_mask();
    let pt = periodogram_raw(truth.values(), truth.timestamps(), mask, grid, true)?;
    let pp = periodogram_raw(pred, truth.timestamps(), mask, grid, true)?;
    let freqs = grid.frequencies_hz();
    let j = grid.len();
    let mut s_sum = vec![0.0; d.channels];
    let mut l_sum = vec![0.0; d.channels];
    let mut used = vec![0usize; d.channels];
    for b in 0..d.samples {
        for k in 0..d.channels {
            let (a, c) = (pt.row(b, k), pp.row(b, k));
            let (sa, sc) = (a.iter().sum::<f64>(), c.iter().sum::<f64>());
            if !(sa > 0.0 && sc > 0.0) || !sa.is_finite() || !sc.is_finite() {
                continue;
            }
            let diff: f64 = a.iter().zip(c).map(|(x, y)| (x / sa - y / sc).abs()).sum();
            s_sum[k] += diff / j as f64;
            let fa = freqs[argmax_lowest(a).expect("finite row")];
            let fc = freqs[argmax_lowest(c).expect("finite row")];
            l_sum[k] += (fa - fc).abs();
            used[k] += 1;
        }
    }
    let rows_used: usize = used.iter().sum();
    ensure!(rows_used > 0, UndefinedMetric, "no (sample, channel) row has a usable periodogram");
    let per = |sums: &[f64]| -> Vec<Option<f64>> {
        sums.iter().zip(&used).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect()
    };
    Ok(SpectralScores {
        s_mae: s_sum.iter().sum::<f64>() / rows_used as f64,
        lfe: l_sum.iter().sum::<f64>() / rows_used as f64,
        per_channel_s_mae: per(&s_sum),
        per_channel_lfe: per(&l_sum),
        rows_used,
        rows_skipped: d.rows() - rows_used,
    })
}

pub fn s_mae(truth: &TimeSeriesBatch, pred: &[f64], grid: &FrequencyGrid) -> Result<f64> {
    Ok(spectral_scores(truth, pred, grid)?.s_mae)
}

pub fn lfe(truth: &TimeSeriesBatch, pred: &[f64], grid: &FrequencyGrid) -> Result<f64> {
    Ok(spectral_scores(truth, pred, grid)?.lfe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub n_targets: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub s_mae: Option<f64>,
    pub lfe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub s_mae: f64,
    pub lfe: f64,
    pub n_targets: usize,
    pub spectral_rows: usize,
    pub skipped_rows: usize,
    pub per_channel: Vec<ChannelReport>,
}

impl EvalReport {
    pub fn metrics(&self) -> [(&'static str, f64); 4] {
        [("MAE", self.mae), ("RMSE", self.rmse), ("S-MAE", self.s_mae), ("LFE", self.lfe)]
    }
}

/// All metrics for one prediction. `truth` must carry the full observation
/// mask (condition and target entries).
pub fn evaluate(
    truth: &TimeSeriesBatch,
    pred: &[f64],
    split: &ConditionalSplit,
    grid: &FrequencyGrid,
) -> Result<EvalReport> {
    check_pred(truth, pred)?;
    let d = truth.dims();
    ensure!(split.target_mask.dims() == d, Shape, "split does not match batch");
    let spectral = spectral_scores(truth, pred, grid)?;
    let per_channel = (0..d.channels)
        .map(|k| {
            let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
            for b in 0..d.samples {
                let r = d.row(b, k);
                for ((&x, &p), &m) in truth.values()[r.clone()].iter().zip(&pred[r]).zip(split.target_mask.row(b, k)) {
                    if m {
                        abs += (x - p).abs();
                        sq += (x - p) * (x - p);
                        n += 1;
                    }
                }
            }
            ChannelReport {
                n_targets: n,
                mae: (n > 0).then(|| abs / n as f64),
                rmse: (n > 0).then(|| (sq / n as f64).sqrt()),
                s_mae: spectral.per_channel_s_mae[k],
                lfe: spectral.per_channel_lfe[k],
            }
        })
        .collect();
    Ok(EvalReport {
        mae: mae(truth, pred, split)?,
        rmse: rmse(truth, pred, split)?,
        s_mae: spectral.s_mae,
        lfe: spectral.lfe,
        n_targets: split.target_mask.count(),
        spectral_rows: spectral.rows_used,
        skipped_rows: spectral.rows_skipped,
        per_channel,
    })
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub dataset: String,
    pub mechanism: String,
    pub rate: f64,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

pub const RESULTS_HEADER: [&str; 7] = ["run_id", "dataset", "mechanism", "rate", "method", "metric", "value"];

pub fn report_rows(report: &EvalReport, run_id: &str, dataset: &str, mechanism: &str, rate: f64, method: &str) -> Vec<ResultRow> {
    report
        .metrics()
        .iter()
        .map(|&(metric, value)| ResultRow {
            run_id: run_id.into(),
            dataset: dataset.into(),
            mechanism: mechanism.into(),
            rate,
            method: method.into(),
            metric: metric.into(),
            value,
        })
        .collect()
}

/// Appends rows to a results CSV, writing the header if the file is new or empty.
pub fn append_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(RESULTS_HEADER)?;
    }
    for r in rows {
        w.write_record([
            r.run_id.as_str(),
            r.dataset.as_str(),
            r.mechanism.as_str(),
            &r.rate.to_string(),
            r.method.as_str(),
            r.metric.as_str(),
            &r.value.to_string(),
        ])?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Dims;

    fn one_target(truth: f64) -> (TimeSeriesBatch, ConditionalSplit) {
        let d = Dims::new(1, 1, 2);
        let b = TimeSeriesBatch::observed(d, vec![0.0, truth], vec![0.0, 1.0]).unwrap();
        let cond = Mask::from_bits(d, vec![true, false]).unwrap();
        let s = ConditionalSplit::from_condition(b.obs_mask(), cond).unwrap();
        (b, s)
    }

    #[test]
    fn one_point_formulas() {
        let (b, s) = one_target(2.0);
        assert_eq!(mae(&b, &[0.0, 3.5], &s).unwrap(), 1.5);
        let (b, s) = one_target(0.0);
        assert_eq!(rmse(&b, &[0.0, 3.0], &s).unwrap(), 3.0);
    }

    #[test]
    fn no_targets_is_an_error() {
        let d = Dims::new(1, 1, 2);
        let b = TimeSeriesBatch::observed(d, vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        let s = ConditionalSplit::all_condition(b.obs_mask());
        assert!(matches!(mae(&b, &[0.0, 1.0], &s), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn identical_prediction_scores_zero() {
        let d = Dims::new(2, 2, 40);
        let t: Vec<f64> = (0..2).flat_map(|_| (0..40).map(|l| l as f64 * 0.25)).collect();
        let x: Vec<f64> = (0..d.len()).map(|i| (i as f64 * 0.7).sin() + 0.1 * i as f64 % 3.0).collect();
        let b = TimeSeriesBatch::observed(d, x.clone(), t).unwrap();
        let cond = Mask::from_bits(d, (0..d.len()).map(|i| i % 3 != 0).collect()).unwrap();
        let s = ConditionalSplit::from_condition(b.obs_mask(), cond).unwrap();
        let g = FrequencyGrid::default_for(&b).unwrap();
        let r = evaluate(&b, &x, &s, &g).unwrap();
        assert_eq!((r.mae, r.rmse, r.s_mae, r.lfe), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.skipped_rows, 0);
    }

    #[test]
    fn flat_prediction_rows_are_skipped() {
        let d = Dims::new(1, 2, 20);
        let t: Vec<f64> = (0..20).map(|l| l as f64).collect();
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let b = TimeSeriesBatch::observed(d, x.clone(), t).unwrap();
        let mut pred = x;
        pred[..20].fill(1.0);
        let g = FrequencyGrid::default_for(&b).unwrap();
        let s = spectral_scores(&b, &pred, &g).unwrap();
        assert_eq!((s.rows_used, s.rows_skipped), (1, 1));
        assert_eq!(s.per_channel_s_mae[0], None);
    }

    #[test]
    fn results_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let report = EvalReport {
            mae: 0.1,
            rmse: 0.2,
            s_mae: 0.3,
            lfe: 0.4,
            n_targets: 1,
            spectral_rows: 1,
            skipped_rows: 0,
            per_channel: vec![],
        };
        let rows = report_rows(&report, "r1", "sines", "mcar", 0.5, "mean");
        append_results_csv(&path, &rows).unwrap();
        append_results_csv(&path, &rows).unwrap();
        let back = read_results_csv(&path).unwrap();
        assert_eq!(back.len(), 8);
        assert_eq!(back[..4], rows[..]);
    }
}
