//! Score-matching training and spectral-consistency fine-tuning.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{Conditioning, LscdModel};
use super::schedule::{noise_with, NoiseSchedule};
use crate::autodiff::{Adam, AdamConfig, Graph, LombScargleOp, Tensor, Unary, Var};
use crate::error::{ensure, Error, Result};
use crate::grid::FrequencyGrid;
use crate::lombscargle::periodogram_raw;
use crate::rng::{derive_seed, derived, Rng};
use crate::split::{make_conditional_split_per_sample, SplitStrategy};
use crate::types::{Mask, TimeSeriesBatch};

/// How much of each sample's observed data becomes the training target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MaskRatio {
    Fixed {
        ratio: f64,
    },
    /// One `U[0, 1]` ratio per batch.
    #[default]
    PerBatchUniform,
    /// An independent `U[0, 1]` ratio per sample.
    PerSampleUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mask_ratio: MaskRatio,
    pub split: SplitStrategy,
    /// Weight of the score-matching loss during fine-tuning.
    pub lambda1: f64,
    /// Weight of the spectral-consistency loss during fine-tuning.
    pub lambda2: f64,
    /// Reverse steps differentiated through for the consistency loss.
    pub truncation_steps: usize,
    /// Stop after this many optimizer steps (all epochs otherwise).
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            mask_ratio: MaskRatio::PerBatchUniform,
            split: SplitStrategy::UniformRandom,
            lambda1: 1.0,
            lambda2: 0.1,
            truncation_steps: 5,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Invalid, "batch size must be positive");
        ensure!(self.adam.lr > 0.0 && self.adam.lr.is_finite(), Invalid, "learning rate must be positive");
        ensure!(self.lambda1 >= 0.0 && self.lambda2 >= 0.0, Invalid, "loss weights must be non-negative");
        ensure!(self.truncation_steps >= 1, Invalid, "truncation needs at least one reverse step");
        if let MaskRatio::Fixed { ratio } = self.mask_ratio {
            ensure!((0.0..=1.0).contains(&ratio), Invalid, "target ratio {ratio} outside [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub s_cons: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceEntry>,
    pub steps: usize,
    /// Epoch whose parameters were kept (best validation loss, else the last).
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
}

/// Output locations for a training run.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn trace(&self) -> PathBuf {
        self.dir.join("loss_trace.jsonl")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best")
    }
}

const VALIDATION_STREAM: u64 = 0x7661_6c69_6461_7465;
const CONSISTENCY_STREAM: u64 = 0x7363_6f6e_7300_0000;

/// Random inputs of one training step.
pub struct StepDraw {
    pub cond: Conditioning,
    pub target: Mask,
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
    pub x_t: Vec<f64>,
}

/// Split, diffusion steps and noise for a batch, consumed from `rng` in
/// that order. Every entry outside the condition mask is noised; values
/// outside the observation mask are treated as zero.
pub fn draw_step(batch: &TimeSeriesBatch, cfg: &TrainConfig, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<StepDraw> {
    let d = batch.dims();
    let ratios = match cfg.mask_ratio {
        MaskRatio::Fixed { ratio } => vec![ratio; d.samples],
        MaskRatio::PerBatchUniform => vec![rng.random::<f64>(); d.samples],
        MaskRatio::PerSampleUniform => (0..d.samples).map(|_| rng.random()).collect(),
    };
    let split = make_conditional_split_per_sample(batch, cfg.split, &ratios, rng)?;
    let t: Vec<usize> = (0..d.samples).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let free: Vec<bool> = split.cond_mask.bits().iter().map(|m| !m).collect();
    let eps: Vec<f64> = free.iter().map(|&f| if f { normal(rng) } else { 0.0 }).collect();
    let x0 = batch.zero_unobserved();
    let x_t = noise_per_sample(x0.values(), &free, &eps, &t, schedule);
    let cond = Conditioning::new(batch, &split.cond_mask)?;
    Ok(StepDraw { cond, target: split.target_mask, t, eps, x_t })
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn noise_per_sample(x0: &[f64], free: &[bool], eps: &[f64], t: &[usize], schedule: &NoiseSchedule) -> Vec<f64> {
    let per = x0.len() / t.len().max(1);
    let mut out = Vec::with_capacity(x0.len());
    for (b, &tb) in t.iter().enumerate() {
        let r = b * per..(b + 1) * per;
        out.extend(noise_with(&x0[r.clone()], &free[r.clone()], &eps[r], tb, schedule));
    }
    out
}

fn batch_tensor(cond: &Conditioning, data: Vec<f64>) -> Result<Tensor> {
    let d = cond.dims;
    Tensor::new(&[d.samples, d.channels, d.steps], data)
}

/// `Σ_target (ε̂ − ε)² / |target|` on the graph.
pub fn score_matching_loss(model: &LscdModel, g: &mut Graph, draw: &StepDraw) -> Result<Var> {
    let x = g.constant(batch_tensor(&draw.cond, draw.x_t.clone())?);
    let eps_hat = model.predict_eps(g, x, &draw.cond, &draw.t)?;
    let eps = g.constant(batch_tensor(&draw.cond, draw.eps.clone())?);
    g.masked_mse(eps_hat, eps, &draw.target.to_f64())
}

/// Mean squared difference of the centered periodograms of `x_hat` and
/// `x0` over the entries of `mask`.
pub fn spectral_consistency(x_hat: &[f64], x0: &[f64], timestamps: &[f64], mask: &Mask, grid: &FrequencyGrid) -> Result<f64> {
    let a = periodogram_raw(x_hat, timestamps, mask, grid, true)?;
    let b = periodogram_raw(x0, timestamps, mask, grid, true)?;
    let n = a.power.len().max(1) as f64;
    Ok(a.power.iter().zip(&b.power).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n)
}

/// Graph form of [`spectral_consistency`], differentiable in `x_hat`.
pub fn spectral_consistency_var(
    g: &mut Graph,
    x_hat: Var,
    x0: &[f64],
    timestamps: &[f64],
    mask: &Mask,
    grid: &FrequencyGrid,
) -> Result<Var> {
    let op = LombScargleOp { timestamps: timestamps.to_vec(), mask: mask.clone(), grid: grid.clone(), center: true };
    let p_hat = g.lomb_scargle(x_hat, op)?;
    let p0 = periodogram_raw(x0, timestamps, mask, grid, true)?;
    let p0 = g.constant(Tensor::new(g.shape(p_hat), p0.power)?);
    let diff = g.sub(p_hat, p0)?;
    let sq = g.unary(diff, Unary::Square);
    Ok(g.mean(sq))
}

/// Consistency loss of a reconstruction from a short differentiable reverse
/// pass: the batch is noised to step `min(truncation, T)` outside the
/// condition mask, denoised back to `x̂₀`, and compared with `x₀` on every
/// observed entry.
pub fn consistency_loss(
    model: &LscdModel,
    g: &mut Graph,
    batch: &TimeSeriesBatch,
    draw: &StepDraw,
    truncation: usize,
    rng: &mut Rng,
) -> Result<Var> {
    let d = batch.dims();
    let ts = truncation.min(model.schedule.steps());
    let x0 = batch.zero_unobserved();
    let cond = &draw.cond;
    let free: Vec<bool> = cond.cond_mask.bits().iter().map(|m| !m).collect();
    let eps: Vec<f64> = free.iter().map(|&f| if f { normal(rng) } else { 0.0 }).collect();
    let start = noise_per_sample(x0.values(), &free, &eps, &vec![ts; d.samples], &model.schedule);
    let free_f = g.constant(batch_tensor(cond, free.iter().map(|&f| f64::from(u8::from(f))).collect())?);
    let x_co = g.constant(batch_tensor(cond, cond.x_co.clone())?);
    let z = model.encode(g, x_co, cond)?;
    let mut x = g.constant(batch_tensor(cond, start)?);
    for t in (1..=ts).rev() {
        let eps_hat = model.denoise(g, x, cond, &vec![t; d.samples], z)?;
        let (a, c) = model.schedule.reverse_coefficients(t);
        let sigma = model.schedule.sigma2(t).sqrt();
        let scaled = g.scale(eps_hat, c);
        let mean = g.sub(x, scaled)?;
        let mean = g.scale(mean, a);
        let noise: Vec<f64> = free.iter().map(|&f| if f { sigma * normal(rng) } else { 0.0 }).collect();
        let noise = g.constant(batch_tensor(cond, noise)?);
        let next = g.add(mean, noise)?;
        let next = g.mul(next, free_f)?;
        x = g.add(next, x_co)?;
    }
    spectral_consistency_var(g, x, x0.values(), batch.timestamps(), batch.obs_mask(), &model.grid)
}

/// Step losses: total, score matching, consistency.
fn step_loss(
    model: &LscdModel,
    g: &mut Graph,
    batch: &TimeSeriesBatch,
    draw: &StepDraw,
    cfg: &TrainConfig,
    spectral: Option<&mut Rng>,
) -> Result<(Var, f64, Option<f64>)> {
    let main = score_matching_loss(model, g, draw)?;
    let main_value = g.value(main).item();
    match spectral {
        None => Ok((main, main_value, None)),
        Some(rng) => {
            let sc = consistency_loss(model, g, batch, draw, cfg.truncation_steps, rng)?;
            let sc_value = g.value(sc).item();
            let a = g.scale(main, cfg.lambda1);
            let b = g.scale(sc, cfg.lambda2);
            Ok((g.add(a, b)?, main_value, Some(sc_value)))
        }
    }
}

/// Score-matching loss (and consistency loss when `spectral`) on a fixed
/// validation draw, averaged over targets and batches respectively.
pub fn validation_losses(model: &LscdModel, val: &TimeSeriesBatch, cfg: &TrainConfig, spectral: bool) -> Result<(f64, Option<f64>)> {
    let mut rng = derived(cfg.seed, VALIDATION_STREAM);
    let mut sc_rng = derived(derive_seed(cfg.seed, VALIDATION_STREAM), CONSISTENCY_STREAM);
    let n = val.dims().samples;
    let idx: Vec<usize> = (0..n).collect();
    let (mut sq, mut count, mut sc_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
    for chunk in idx.chunks(cfg.batch_size) {
        let batch = val.select_samples(chunk);
        let draw = draw_step(&batch, cfg, &model.schedule, &mut rng)?;
        let mut g = Graph::frozen();
        let main = score_matching_loss(model, &mut g, &draw)?;
        let w = draw.target.count() as f64;
        sq += g.value(main).item() * w;
        count += w;
        if spectral {
            let sc = consistency_loss(model, &mut g, &batch, &draw, cfg.truncation_steps, &mut sc_rng)?;
            sc_sum += g.value(sc).item();
        }
        batches += 1;
    }
    let loss = if count > 0.0 { sq / count } else { 0.0 };
    Ok((loss, spectral.then(|| sc_sum / batches.max(1) as f64)))
}

/// Minimizes the score-matching loss over random condition/target splits of
/// `train`. Keeps the parameters of the best validation epoch when `val` is
/// given. With `files`, writes a JSONL loss trace and `last`/`best`
/// checkpoints every epoch.
pub fn train_main(model: &mut LscdModel, train: &TimeSeriesBatch, val: Option<&TimeSeriesBatch>, cfg: &TrainConfig, files: Option<&RunFiles>) -> Result<TrainReport> {
    run(model, train, val, cfg, files, false)
}

/// Continues training on `λ₁·score-matching + λ₂·consistency` with a fresh
/// optimizer. Batch order, splits and noise follow the same streams as
/// [`train_main`] for the same seed.
pub fn finetune_spectral(model: &mut LscdModel, train: &TimeSeriesBatch, val: Option<&TimeSeriesBatch>, cfg: &TrainConfig, files: Option<&RunFiles>) -> Result<TrainReport> {
    run(model, train, val, cfg, files, true)
}

fn run(
    model: &mut LscdModel,
    train: &TimeSeriesBatch,
    val: Option<&TimeSeriesBatch>,
    cfg: &TrainConfig,
    files: Option<&RunFiles>,
    spectral: bool,
) -> Result<TrainReport> {
    crate::alloc::retain_large_buffers();
    cfg.validate()?;
    ensure!(train.dims().samples > 0, Invalid, "training set is empty");
    ensure!(train.dims().channels == model.channels, Shape, "model has {} channels, data {}", model.channels, train.dims().channels);
    ensure!(model.store.is_finite(), NonFinite, "initial model parameters");
    let mut trace_file = match files {
        Some(f) => {
            std::fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
            let path = f.trace();
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut report = TrainReport { trace: Vec::new(), steps: 0, best_epoch: None, best_val: None };
    let mut best_params: Option<Vec<f64>> = None;
    let n = train.dims().samples;
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = derived(cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut sc_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut stop = false;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.select_samples(chunk);
            let draw = draw_step(&batch, cfg, &model.schedule, &mut rng)?;
            let mut sc_rng = spectral.then(|| derived(derive_seed(cfg.seed, CONSISTENCY_STREAM), report.steps as u64));
            let mut g = Graph::new();
            let (loss, main, sc) = step_loss(model, &mut g, &batch, &draw, cfg, sc_rng.as_mut())?;
            let total = g.value(loss).item();
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: total });
            }
            let grads = g.backward(loss)?.param_grads(&model.store);
            adam.step(&mut model.store, &grads).map_err(|_| Error::Diverged { epoch, step, loss: total })?;
            report.steps += 1;
            loss_sum += main;
            sc_sum += sc.unwrap_or(0.0);
            batches += 1;
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                stop = true;
                break;
            }
        }
        let b = batches.max(1) as f64;
        let mut entries = vec![TraceEntry { epoch, split: "train".into(), loss: loss_sum / b, s_cons: spectral.then(|| sc_sum / b) }];
        let mut improved = val.is_none();
        if let Some(v) = val {
            let (loss, s_cons) = validation_losses(model, v, cfg, spectral)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step: batches, loss });
            }
            if report.best_val.is_none_or(|best| loss < best) {
                report.best_val = Some(loss);
                improved = true;
            }
            entries.push(TraceEntry { epoch, split: "val".into(), loss, s_cons });
        }
        if improved {
            report.best_epoch = Some(epoch);
            if val.is_some() {
                best_params = Some(model.store.flatten());
            }
        }
        if let Some(f) = files {
            let meta = serde_json::json!({ "epoch": epoch, "steps": report.steps });
            model.save(&f.last(), meta.clone())?;
            if improved {
                model.save(&f.best(), meta)?;
            }
        }
        if let Some((file, path)) = trace_file.as_mut() {
            for e in &entries {
                let line = serde_json::to_string(e)?;
                writeln!(file, "{line}").map_err(|err| Error::io(path.as_path(), err))?;
            }
        }
        report.trace.extend(entries);
        if stop {
            break 'epochs;
        }
    }
    if let Some(p) = best_params {
        model.store.load_flat(&p)?;
    }
    Ok(report)
}

/// Reads a loss trace written during training.
pub fn read_trace(path: &Path) -> Result<Vec<TraceEntry>> {
    let text = crate::io::read_text(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
