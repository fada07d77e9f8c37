//! Seeded end-to-end imputation experiments on synthetic sines.
//!
//! Every random draw in a run descends from [`ExperimentConfig::seed`]:
//! the generator, the missingness mask, the train/val/test partition, model
//! initialization, training, fine-tuning and sampling each get their own
//! derived stream. Seeds written inside the nested sections are ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{impute_lerp, impute_mean};
use crate::diffusion::{
    finetune_spectral, sample_impute, train_main, Conditioning, LscdModel, ModelConfig, RunFiles, SampleConfig,
    TrainConfig, TrainReport,
};
use crate::error::{ensure, Error, Result};
use crate::grid::{FrequencyGrid, GridSpec};
use crate::io::{read_batch_json, write_batch_json, write_json, Meta};
use crate::manifest::{content_hash, Manifest};
use crate::metrics::{append_results_csv, evaluate, report_rows, EvalReport, ResultRow};
use crate::missingness::{apply_missingness, shuffled_indices, MissingnessOutcome, MissingnessSpec};
use crate::normalize::NormalizationStats;
use crate::rng::derive_seed;
use crate::split::ConditionalSplit;
use crate::synth::{generate_sines, GroundTruth, SinesConfig, SinesDataset};
use crate::types::{Mask, TimeSeriesBatch};

const DATASET_STREAM: u64 = 1;
const MISSINGNESS_STREAM: u64 = 2;
const PARTITION_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;
const TRAIN_STREAM: u64 = 5;
const FINETUNE_STREAM: u64 = 6;
const SAMPLE_STREAM: u64 = 7;
const INITIAL_MISSING_STREAM: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Label written to result tables.
    pub name: String,
    pub sines: SinesConfig,
    /// MCAR rate applied at generation, before the evaluated mechanism.
    pub initial_missing: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { name: "sines".into(), sines: SinesConfig::default(), initial_missing: 0.1, train_fraction: 0.7, val_fraction: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mean,
    Lerp,
    Lscd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mean, Method::Lerp, Method::Lscd];

    /// Name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Mean => "Mean",
            Method::Lerp => "Lerp",
            Method::Lscd => "LSCD",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Method::Mean => "mean",
            Method::Lerp => "lerp",
            Method::Lscd => "lscd",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown method {s:?} (expected mean, lerp or lscd)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sample: SampleConfig,
    pub methods: Vec<Method>,
    /// Evaluate only the first `n` test samples.
    pub max_test_samples: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sample: SampleConfig::default(), methods: Method::ALL.to_vec(), max_test_samples: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "default_missingness")]
    pub missingness: MissingnessSpec,
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Spectral-consistency fine-tuning after training, skipped when absent.
    pub finetune: Option<TrainConfig>,
    pub eval: EvalConfig,
    pub seed: u64,
}

fn default_missingness() -> MissingnessSpec {
    MissingnessSpec::mcar(0.5, 0)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            missingness: default_missingness(),
            grid: GridSpec::Auto,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: None,
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_text(path)?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    /// Copy with every nested seed derived from the top-level one.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.dataset.sines.seed = derive_seed(s, DATASET_STREAM);
        c.missingness.seed = derive_seed(s, MISSINGNESS_STREAM);
        c.train.seed = derive_seed(s, TRAIN_STREAM);
        if let Some(f) = c.finetune.as_mut() {
            f.seed = derive_seed(s, FINETUNE_STREAM);
        }
        c.eval.sample.seed = derive_seed(s, SAMPLE_STREAM);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        d.sines.validate()?;
        ensure!((0.0..=1.0).contains(&d.initial_missing), Invalid, "initial_missing {} outside [0, 1]", d.initial_missing);
        ensure!(
            d.train_fraction > 0.0 && d.val_fraction >= 0.0 && d.train_fraction + d.val_fraction < 1.0,
            Invalid,
            "train_fraction {} and val_fraction {} must leave room for a test set",
            d.train_fraction,
            d.val_fraction
        );
        self.missingness.validate(d.sines.channels.len(), d.sines.steps)?;
        self.model.validate()?;
        self.train.validate()?;
        if let Some(f) = &self.finetune {
            f.validate()?;
        }
        ensure!(!self.eval.methods.is_empty(), Invalid, "no evaluation methods");
        Ok(())
    }

    /// Content hash of the resolved config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.resolved()).expect("config serializes");
        content_hash(&bytes)
    }

    /// Short identifier of the run, stable across re-runs.
    pub fn run_id(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, INIT_STREAM)
    }
}

/// Sample indices of each part of the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn new(n: usize, cfg: &ExperimentConfig) -> Result<Self> {
        let idx = shuffled_indices(n, derive_seed(cfg.seed, PARTITION_STREAM));
        let n_train = (n as f64 * cfg.dataset.train_fraction).round() as usize;
        let n_val = (n as f64 * cfg.dataset.val_fraction).round() as usize;
        ensure!(n_train >= 1 && n_train + n_val < n, Invalid, "{n} samples cannot be split into train/val/test");
        let mut test = idx[n_train + n_val..].to_vec();
        if let Some(m) = cfg.eval.max_test_samples {
            test.truncate(m.max(1));
        }
        Ok(Self { train: idx[..n_train].to_vec(), val: idx[n_train..n_train + n_val].to_vec(), test })
    }
}

/// File names inside an output directory.
pub mod files {
    pub const DATASET: &str = "dataset.json";
    pub const MASKED: &str = "masked.json";
    pub const PARTITION: &str = "partition.json";
    pub const MODEL_DIR: &str = "model";
    pub const FINETUNE_DIR: &str = "finetune";
    pub const RESULTS: &str = "results.csv";
    pub const MANIFEST: &str = "manifest.json";

    pub fn predictions(method: super::Method) -> String {
        format!("predictions_{}.json", method.key())
    }
}

/// Sines with the initial MCAR missingness already applied to the mask.
pub fn generate(cfg: &ExperimentConfig) -> Result<SinesDataset> {
    let mut data = generate_sines(&cfg.dataset.sines)?;
    let initial = MissingnessSpec::mcar(cfg.dataset.initial_missing, derive_seed(cfg.seed, INITIAL_MISSING_STREAM));
    data.batch = apply_missingness(&data.batch, &initial)?.batch;
    Ok(data)
}

pub fn write_dataset(path: &Path, data: &SinesDataset) -> Result<()> {
    let mut meta = Meta::new();
    meta.insert("ground_truth".into(), serde_json::to_value(&data.truth)?);
    write_batch_json(path, &data.batch, &meta)
}

/// Batch plus its generating parameters, when the file carries them.
pub fn read_dataset(path: &Path) -> Result<(TimeSeriesBatch, Option<GroundTruth>)> {
    let (batch, meta) = read_batch_json(path)?;
    let truth = meta.get("ground_truth").map(|v| serde_json::from_value(v.clone())).transpose()?;
    Ok((batch, truth))
}

/// Applies the configured mechanism and blanks the dropped values so the
/// masked data carries nothing beyond what is observed.
pub fn mask(cfg: &ExperimentConfig, truth: &TimeSeriesBatch) -> Result<MissingnessOutcome> {
    let mut out = apply_missingness(truth, &cfg.missingness)?;
    out.batch = hide_unobserved(&out.batch);
    Ok(out)
}

pub fn hide_unobserved(batch: &TimeSeriesBatch) -> TimeSeriesBatch {
    let values = batch.values().iter().zip(batch.obs_mask().bits()).map(|(&v, &m)| if m { v } else { f64::NAN }).collect();
    batch.with_values(values).expect("same shape")
}

pub fn write_masked(path: &Path, out: &MissingnessOutcome) -> Result<()> {
    let mut meta = Meta::new();
    meta.insert("achieved_rate".into(), json!(out.achieved_rate));
    meta.insert("total_missing_rate".into(), json!(out.total_missing_rate));
    if let Some(w) = &out.warning {
        meta.insert("warning".into(), json!(w));
    }
    write_batch_json(path, &out.batch, &meta)
}

/// Masked batch as read from disk, unobserved values set to zero.
pub fn read_masked(path: &Path) -> Result<TimeSeriesBatch> {
    Ok(read_batch_json(path)?.0.zero_unobserved())
}

/// Training and validation parts of `masked`, normalized with `stats`.
pub fn normalized_parts(
    masked: &TimeSeriesBatch,
    part: &Partition,
    stats: &NormalizationStats,
) -> Result<(TimeSeriesBatch, Option<TimeSeriesBatch>)> {
    let masked = masked.zero_unobserved();
    let train = stats.apply(&masked.select_samples(&part.train))?.zero_unobserved();
    let val = if part.val.is_empty() {
        None
    } else {
        Some(stats.apply(&masked.select_samples(&part.val))?.zero_unobserved())
    };
    Ok((train, val))
}

/// Trains a fresh model; checkpoints and the loss trace go under `dir`.
pub fn train(cfg: &ExperimentConfig, masked: &TimeSeriesBatch, dir: &Path) -> Result<(LscdModel, TrainReport)> {
    let part = Partition::new(masked.dims().samples, cfg)?;
    let stats = NormalizationStats::fit(&masked.zero_unobserved().select_samples(&part.train));
    let (train, val) = normalized_parts(masked, &part, &stats)?;
    let grid = cfg.grid.resolve(&train)?;
    let mut model = LscdModel::for_batch(&cfg.model, &train, grid, cfg.model_seed())?;
    model.normalization = stats;
    let files = RunFiles::new(dir);
    let report = train_main(&mut model, &train, val.as_ref(), &cfg.train, Some(&files))?;
    save_final(&model, &files, cfg, &report)?;
    Ok((model, report))
}

/// Continues training with the consistency loss, keeping the model's
/// normalization. The config must carry a `finetune` section.
pub fn finetune(
    cfg: &ExperimentConfig,
    model: &mut LscdModel,
    masked: &TimeSeriesBatch,
    dir: &Path,
) -> Result<TrainReport> {
    let ft = cfg.finetune.as_ref().ok_or_else(|| Error::Invalid("config has no finetune section".into()))?;
    let part = Partition::new(masked.dims().samples, cfg)?;
    let (train, val) = normalized_parts(masked, &part, &model.normalization.clone())?;
    let files = RunFiles::new(dir);
    let report = finetune_spectral(model, &train, val.as_ref(), ft, Some(&files))?;
    save_final(model, &files, cfg, &report)?;
    Ok(report)
}

fn save_final(model: &LscdModel, files: &RunFiles, cfg: &ExperimentConfig, report: &TrainReport) -> Result<()> {
    let extra = json!({
        "config_hash": cfg.hash(),
        "steps": report.steps,
        "best_epoch": report.best_epoch,
        "best_val": report.best_val,
    });
    model.save(&files.dir.join("model"), extra)
}

/// Checkpoint stem written by [`train`] and [`finetune`].
pub fn model_stem(dir: &Path) -> PathBuf {
    dir.join("model")
}

/// Predictions for the test samples, in the units of `masked`. The condition
/// set is everything observed in `masked`.
pub fn impute(
    cfg: &ExperimentConfig,
    method: Method,
    model: Option<&LscdModel>,
    masked: &TimeSeriesBatch,
    samples: &[usize],
) -> Result<Vec<f64>> {
    let batch = masked.zero_unobserved().select_samples(samples);
    let split = ConditionalSplit::all_condition(batch.obs_mask());
    match method {
        Method::Mean => impute_mean(&batch, &split),
        Method::Lerp => impute_lerp(&batch, &split),
        Method::Lscd => {
            let model = model.ok_or_else(|| Error::Invalid("LSCD imputation needs a trained model".into()))?;
            let d = batch.dims();
            ensure!(d.channels == model.channels, Shape, "model has {} channels, data {}", model.channels, d.channels);
            let norm = model.normalization.apply(&batch)?.zero_unobserved();
            let cond = Conditioning::new(&norm, norm.obs_mask())?;
            let out = sample_impute(model, &model.schedule, &cond, &cfg.eval.sample)?;
            let mut values = model.normalization.invert_values(&out.median, d.channels, d.steps);
            for ((v, &x), &m) in values.iter_mut().zip(batch.values()).zip(batch.obs_mask().bits()) {
                if m {
                    *v = x;
                }
            }
            Ok(values)
        }
    }
}

pub fn write_predictions(path: &Path, masked: &TimeSeriesBatch, samples: &[usize], method: Method, values: Vec<f64>) -> Result<()> {
    let batch = masked.select_samples(samples).with_values(values)?;
    let full = Mask::full(batch.dims());
    let mut meta = Meta::new();
    meta.insert("method".into(), json!(method.label()));
    meta.insert("samples".into(), json!(samples));
    write_batch_json(path, &batch.with_mask(full)?, &meta)
}

/// Contents of a predictions file.
pub struct Predictions {
    pub values: Vec<f64>,
    /// Dataset samples covered; all of them when the file does not say.
    pub samples: Option<Vec<usize>>,
    pub method: Option<String>,
}

pub fn read_predictions(path: &Path) -> Result<Predictions> {
    let (batch, meta) = read_batch_json(path)?;
    let samples = meta.get("samples").map(|v| serde_json::from_value(v.clone())).transpose()?;
    let method = meta.get("method").and_then(|v| v.as_str()).map(String::from);
    if let Some(bad) = batch.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("prediction entry {bad} in {}", path.display())));
    }
    Ok(Predictions { values: batch.values().to_vec(), samples, method })
}

/// Scores predictions for `samples` on the entries hidden by the mask.
pub fn score(
    truth: &TimeSeriesBatch,
    masked: &TimeSeriesBatch,
    samples: &[usize],
    pred: &[f64],
    grid: &GridSpec,
) -> Result<EvalReport> {
    ensure!(truth.dims() == masked.dims(), Shape, "truth {:?} and masked data {:?} differ", truth.dims(), masked.dims());
    let t = truth.select_samples(samples);
    let m = masked.select_samples(samples);
    ensure!(m.obs_mask().is_subset_of(t.obs_mask()), Invalid, "masked data observes entries the truth does not");
    let split = ConditionalSplit::from_condition(t.obs_mask(), m.obs_mask().clone())?;
    let grid: FrequencyGrid = grid.resolve(&t)?;
    evaluate(&t, pred, &split, &grid)
}

pub fn result_rows(cfg: &ExperimentConfig, method: &str, report: &EvalReport) -> Vec<ResultRow> {
    report_rows(
        report,
        &cfg.run_id(),
        &cfg.dataset.name,
        cfg.missingness.name(),
        cfg.missingness.rate(),
        method,
    )
}

/// Everything a full run produced.
pub struct RunOutcome {
    pub rows: Vec<ResultRow>,
    pub reports: Vec<(Method, EvalReport)>,
    pub train: Option<TrainReport>,
    pub finetune: Option<TrainReport>,
    pub achieved_rate: f64,
}

/// Generate, mask, train, impute and score, writing every artifact and a
/// manifest into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = Manifest::new("run", &cfg)?;

    let data = generate(&cfg)?;
    let dataset_path = out.join(files::DATASET);
    write_dataset(&dataset_path, &data)?;
    let masked_out = mask(&cfg, &data.batch)?;
    let masked_path = out.join(files::MASKED);
    write_masked(&masked_path, &masked_out)?;
    let masked = masked_out.batch.zero_unobserved();
    let part = Partition::new(masked.dims().samples, &cfg)?;
    write_json(&out.join(files::PARTITION), &part)?;

    let wants_model = cfg.eval.methods.contains(&Method::Lscd);
    let (model, train_report, ft_report) = if wants_model {
        let (mut model, tr) = train(&cfg, &masked, &out.join(files::MODEL_DIR))?;
        let ft = match cfg.finetune {
            Some(_) => Some(finetune(&cfg, &mut model, &masked, &out.join(files::FINETUNE_DIR))?),
            None => None,
        };
        (Some(model), Some(tr), ft)
    } else {
        (None, None, None)
    };

    let results_path = out.join(files::RESULTS);
    if results_path.exists() {
        std::fs::remove_file(&results_path).map_err(|e| Error::io(&results_path, e))?;
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &method in &cfg.eval.methods {
        let pred = impute(&cfg, method, model.as_ref(), &masked, &part.test)?;
        write_predictions(&out.join(files::predictions(method)), &masked_out.batch, &part.test, method, pred.clone())?;
        let report = score(&data.batch, &masked, &part.test, &pred, &cfg.grid)?;
        rows.extend(result_rows(&cfg, method.label(), &report));
        reports.push((method, report));
    }
    append_results_csv(&results_path, &rows)?;
    crate::report::write_report(out, &rows)?;

    manifest.note("achieved_rate", json!(masked_out.achieved_rate));
    manifest.note("total_missing_rate", json!(masked_out.total_missing_rate));
    manifest.output(&dataset_path)?;
    manifest.output(&masked_path)?;
    manifest.output(&results_path)?;
    manifest.write(&out.join(files::MANIFEST))?;
    Ok(RunOutcome {
        rows,
        reports,
        train: train_report,
        finetune: ft_report,
        achieved_rate: masked_out.achieved_rate,
    })
}
