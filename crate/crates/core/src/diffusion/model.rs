//! Spectrum encoder and conditional noise predictor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::{make_schedule, NoiseSchedule, ScheduleConfig};
use crate::autodiff::nn::{sinusoidal_embedding, Conv1dTime, Linear, TransformerLayer};
use crate::autodiff::{load_checkpoint, save_checkpoint, Graph, Init, LombScargleOp, ParamId, ParamStore, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::grid::FrequencyGrid;
use crate::lombscargle::FeatureOptions;
use crate::normalize::NormalizationStats;
use crate::rng::seeded;
use crate::types::{Dims, Mask, TimeSeriesBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralEncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Attention layers over the frequency axis.
    pub freq_depth: usize,
    /// Attention layers over the channel axis; 0 makes the encoder channel-wise.
    pub feature_depth: usize,
    pub feature: FeatureOptions,
}

impl Default for SpectralEncoderConfig {
    fn default() -> Self {
        Self { d_model: 64, n_heads: 8, d_ff: 64, freq_depth: 4, feature_depth: 4, feature: FeatureOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub channels: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub step_emb_dim: usize,
    pub time_emb_dim: usize,
    pub conv_kernel: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { layers: 2, channels: 64, n_heads: 8, d_ff: 64, step_emb_dim: 128, time_emb_dim: 128, conv_kernel: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    /// `None` trains without spectral conditioning.
    pub encoder: Option<SpectralEncoderConfig>,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { denoiser: DenoiserConfig::default(), encoder: Some(SpectralEncoderConfig::default()), schedule: ScheduleConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.denoiser;
        ensure!(
            d.layers > 0 && d.channels > 0 && d.d_ff > 0 && d.step_emb_dim > 0 && d.time_emb_dim > 0,
            Invalid,
            "denoiser dimensions must be positive"
        );
        ensure!(d.n_heads > 0 && d.channels.is_multiple_of(d.n_heads), Invalid, "denoiser width {} not divisible by {} heads", d.channels, d.n_heads);
        ensure!(d.conv_kernel % 2 == 1, Invalid, "convolution kernel must be odd");
        if let Some(e) = &self.encoder {
            ensure!(e.d_model > 0 && e.d_ff > 0, Invalid, "encoder dimensions must be positive");
            ensure!(e.n_heads > 0 && e.d_model % e.n_heads == 0, Invalid, "encoder width {} not divisible by {} heads", e.d_model, e.n_heads);
        }
        ensure!(self.schedule.steps >= 1, Invalid, "diffusion needs at least one step");
        Ok(())
    }
}

/// Everything the network sees besides the noisy targets.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub dims: Dims,
    /// Observed values on condition entries, zero elsewhere.
    pub x_co: Vec<f64>,
    pub cond_mask: Mask,
    pub timestamps: Vec<f64>,
}

impl Conditioning {
    pub fn new(batch: &TimeSeriesBatch, cond_mask: &Mask) -> Result<Self> {
        ensure!(cond_mask.dims() == batch.dims(), Shape, "condition mask does not match batch");
        ensure!(cond_mask.is_subset_of(batch.obs_mask()), Invalid, "condition mask covers unobserved entries");
        let x_co = batch.values().iter().zip(cond_mask.bits()).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        Ok(Self { dims: batch.dims(), x_co, cond_mask: cond_mask.clone(), timestamps: batch.timestamps().to_vec() })
    }

    /// Samples picked by index, repeats allowed.
    pub fn select(&self, samples: &[usize]) -> Self {
        let d = self.dims;
        let per = d.channels * d.steps;
        let mut x_co = Vec::with_capacity(samples.len() * per);
        let mut timestamps = Vec::with_capacity(samples.len() * d.steps);
        for &b in samples {
            x_co.extend_from_slice(&self.x_co[b * per..(b + 1) * per]);
            timestamps.extend_from_slice(&self.timestamps[b * d.steps..(b + 1) * d.steps]);
        }
        Self { dims: d.with_samples(samples.len()), x_co, cond_mask: self.cond_mask.select_samples(samples), timestamps }
    }

    fn tensor(&self, data: Vec<f64>, trailing_one: bool) -> Tensor {
        let d = self.dims;
        let shape: &[usize] = if trailing_one { &[d.samples, d.channels, d.steps, 1] } else { &[d.samples, d.channels, d.steps] };
        Tensor { shape: shape.to_vec(), data }
    }
}

pub struct SpectralEncoder {
    cfg: SpectralEncoderConfig,
    input: Linear,
    freq_layers: Vec<TransformerLayer>,
    feature_layers: Vec<TransformerLayer>,
}

impl SpectralEncoder {
    fn new(store: &mut ParamStore, cfg: &SpectralEncoderConfig, rng: &mut crate::rng::Rng) -> Result<Self> {
        let input = Linear::new(store, "enc.in", 1, cfg.d_model, rng);
        let freq_layers = (0..cfg.freq_depth)
            .map(|i| TransformerLayer::new(store, &format!("enc.freq{i}"), cfg.d_model, cfg.n_heads, cfg.d_ff, rng))
            .collect::<Result<_>>()?;
        let feature_layers = (0..cfg.feature_depth)
            .map(|i| TransformerLayer::new(store, &format!("enc.feat{i}"), cfg.d_model, cfg.n_heads, cfg.d_ff, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), input, freq_layers, feature_layers })
    }

    /// `values [B, K, L] → z_S [B, K, d_model]`, reading only condition entries.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, values: Var, cond: &Conditioning, grid: &FrequencyGrid) -> Result<Var> {
        let d = cond.dims;
        let j = grid.len();
        let dm = self.cfg.d_model;
        let op = LombScargleOp { timestamps: cond.timestamps.clone(), mask: cond.cond_mask.clone(), grid: grid.clone(), center: false };
        let power = g.lomb_scargle(values, op)?;
        let feat = g.spectral_feature(power, self.cfg.feature);
        let tokens = g.reshape(feat, &[d.samples * d.channels, j, 1])?;
        let mut h = self.input.forward(g, store, tokens)?;
        let positions: Vec<f64> = (0..j).map(|i| i as f64).collect();
        let freq_pos = g.constant(Tensor { shape: vec![j, dm], data: sinusoidal_embedding(&positions, dm) });
        h = g.add_bcast(h, freq_pos)?;
        for layer in &self.freq_layers {
            h = layer.forward(g, store, h)?;
        }
        let pooled = g.mean_axis(h, 1)?;
        let mut z = g.reshape(pooled, &[d.samples, d.channels, dm])?;
        for layer in &self.feature_layers {
            z = layer.forward(g, store, z)?;
        }
        Ok(z)
    }
}

struct ResidualLayer {
    step: Linear,
    time_attn: TransformerLayer,
    feature_attn: Option<TransformerLayer>,
    conv: Conv1dTime,
    side: Linear,
    out: Linear,
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    steps: usize,
    input: Linear,
    step_mlp: (Linear, Linear),
    time_proj: Linear,
    feature_emb: ParamId,
    z_proj: Option<Linear>,
    layers: Vec<ResidualLayer>,
    head: Linear,
    out: Linear,
}

impl Denoiser {
    fn new(store: &mut ParamStore, cfg: &DenoiserConfig, channels: usize, steps: usize, z_dim: Option<usize>, rng: &mut crate::rng::Rng) -> Result<Self> {
        let c = cfg.channels;
        let e = cfg.step_emb_dim;
        let input = Linear::new(store, "den.in", 3, c, rng);
        let step_mlp = (Linear::new(store, "den.step1", e, e, rng), Linear::new(store, "den.step2", e, e, rng));
        let time_proj = Linear::new(store, "den.time", cfg.time_emb_dim, c, rng);
        let feature_emb = store.add("den.feature_emb", &[channels, c], Init::TruncNormal { std: crate::autodiff::nn::INIT_STD }, rng);
        let z_proj = z_dim.map(|zd| Linear::new(store, "den.z", zd, c, rng));
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("den.res{i}");
            layers.push(ResidualLayer {
                step: Linear::new(store, &format!("{p}.step"), e, c, rng),
                time_attn: TransformerLayer::new(store, &format!("{p}.time"), c, cfg.n_heads, cfg.d_ff, rng)?,
                feature_attn: if channels > 1 {
                    Some(TransformerLayer::new(store, &format!("{p}.feat"), c, cfg.n_heads, cfg.d_ff, rng)?)
                } else {
                    None
                },
                conv: Conv1dTime::new(store, &format!("{p}.conv"), c, 2 * c, cfg.conv_kernel, rng),
                side: Linear::new(store, &format!("{p}.side"), c, 2 * c, rng),
                out: Linear::new(store, &format!("{p}.out"), c, 2 * c, rng),
            });
        }
        let head = Linear::new(store, "den.head", c, c, rng);
        // Zero output layer: the untrained model predicts ε̂ = 0.
        let out = Linear::with_init(store, "den.out", c, 1, Init::Zeros, rng);
        Ok(Self { cfg: cfg.clone(), steps, input, step_mlp, time_proj, feature_emb, z_proj, layers, head, out })
    }

    /// `ε̂ [B, K, L]` for noisy values `x_t [B, K, L]` at per-sample steps `t ∈ 1..=T`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: Var,
        cond: &Conditioning,
        time_scale: f64,
        t: &[usize],
        z: Option<Var>,
    ) -> Result<Var> {
        let d = cond.dims;
        let (b, k, l, c) = (d.samples, d.channels, d.steps, self.cfg.channels);
        ensure!(g.shape(x_t) == [b, k, l], Shape, "noisy input {:?}, expected [{b}, {k}, {l}]", g.shape(x_t));
        ensure!(t.len() == b, Shape, "{} diffusion steps for {b} samples", t.len());
        ensure!(t.iter().all(|&s| (1..=self.steps).contains(&s)), Invalid, "diffusion step outside 1..={}", self.steps);
        ensure!(z.is_some() == self.z_proj.is_some(), Invalid, "spectral embedding presence does not match the model");

        // Noisy targets, condition values, condition mask.
        let cond_f = cond.cond_mask.to_f64();
        let free = g.constant(cond.tensor(cond_f.iter().map(|m| 1.0 - m).collect(), false));
        let noisy = g.mul(x_t, free)?;
        let noisy = g.reshape(noisy, &[b, k, l, 1])?;
        let x_co = g.constant(cond.tensor(cond.x_co.clone(), true));
        let cm = g.constant(cond.tensor(cond_f, true));
        let inp = g.concat_last(&[noisy, x_co, cm])?;
        let inp = self.input.forward(g, store, inp)?;
        let mut h = g.relu(inp);

        // Side information: timestamps, channel identity, spectrum.
        let positions: Vec<f64> = cond.timestamps.iter().map(|s| s / time_scale).collect();
        let temb = g.constant(Tensor { shape: vec![b, l, self.cfg.time_emb_dim], data: sinusoidal_embedding(&positions, self.cfg.time_emb_dim) });
        let temb = self.time_proj.forward(g, store, temb)?;
        let mut side = g.expand_axis(temb, 1, k)?;
        let fe = g.param(store, self.feature_emb);
        let fe = g.expand_axis(fe, 1, l)?;
        side = g.add_bcast(side, fe)?;
        if let (Some(proj), Some(z)) = (&self.z_proj, z) {
            let zc = proj.forward(g, store, z)?;
            let zc = g.expand_axis(zc, 2, l)?;
            side = g.add(side, zc)?;
        }

        // Diffusion-step embedding.
        let e = self.cfg.step_emb_dim;
        let table_pos: Vec<f64> = (0..self.steps).map(|s| s as f64).collect();
        let table = g.constant(Tensor { shape: vec![self.steps, e], data: sinusoidal_embedding(&table_pos, e) });
        let idx: Vec<usize> = t.iter().map(|s| s - 1).collect();
        let semb = g.gather_rows(table, &idx)?;
        let semb = self.step_mlp.0.forward(g, store, semb)?;
        let semb = g.gelu(semb);
        let semb = self.step_mlp.1.forward(g, store, semb)?;
        let semb = g.gelu(semb);

        let mut skips: Option<Var> = None;
        for layer in &self.layers {
            let s = layer.step.forward(g, store, semb)?;
            let s = g.expand_axis(s, 1, k)?;
            let s = g.expand_axis(s, 2, l)?;
            let mut y = g.add(h, s)?;

            let yt = g.reshape(y, &[b * k, l, c])?;
            let yt = layer.time_attn.forward(g, store, yt)?;
            y = g.reshape(yt, &[b, k, l, c])?;
            if let Some(attn) = &layer.feature_attn {
                let yf = g.permute(y, &[0, 2, 1, 3])?;
                let yf = g.reshape(yf, &[b * l, k, c])?;
                let yf = attn.forward(g, store, yf)?;
                let yf = g.reshape(yf, &[b, l, k, c])?;
                y = g.permute(yf, &[0, 2, 1, 3])?;
            }

            let yc = g.reshape(y, &[b * k, l, c])?;
            let yc = layer.conv.forward(g, store, yc)?;
            let yc = g.reshape(yc, &[b, k, l, 2 * c])?;
            let sp = layer.side.forward(g, store, side)?;
            let y = g.add(yc, sp)?;
            let gate = g.slice_last(y, 0, c)?;
            let filt = g.slice_last(y, c, c)?;
            let gate = g.sigmoid(gate);
            let filt = g.tanh(filt);
            let y = g.mul(gate, filt)?;
            let y = layer.out.forward(g, store, y)?;
            let res = g.slice_last(y, 0, c)?;
            let skip = g.slice_last(y, c, c)?;
            let sum = g.add(h, res)?;
            h = g.scale(sum, std::f64::consts::FRAC_1_SQRT_2);
            skips = Some(match skips {
                Some(acc) => g.add(acc, skip)?,
                None => skip,
            });
        }
        let skips = skips.expect("at least one residual layer");
        let y = g.scale(skips, 1.0 / (self.layers.len() as f64).sqrt());
        let y = self.head.forward(g, store, y)?;
        let y = g.relu(y);
        let y = self.out.forward(g, store, y)?;
        g.reshape(y, &[b, k, l])
    }
}

/// Spectrum-conditioned diffusion imputer with its parameters.
pub struct LscdModel {
    pub config: ModelConfig,
    pub channels: usize,
    pub grid: FrequencyGrid,
    /// Timestamp unit for the positional embedding (training median spacing).
    pub time_scale: f64,
    pub normalization: NormalizationStats,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    encoder: Option<SpectralEncoder>,
    denoiser: Denoiser,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    channels: usize,
    grid: FrequencyGrid,
    time_scale: f64,
    normalization: NormalizationStats,
    #[serde(default)]
    extra: serde_json::Value,
}

impl LscdModel {
    pub fn new(config: &ModelConfig, channels: usize, grid: FrequencyGrid, time_scale: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure!(channels > 0, Invalid, "model needs at least one channel");
        ensure!(time_scale.is_finite() && time_scale > 0.0, Invalid, "time scale must be positive, got {time_scale}");
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let encoder = config.encoder.as_ref().map(|e| SpectralEncoder::new(&mut store, e, &mut rng)).transpose()?;
        let z_dim = config.encoder.as_ref().map(|e| e.d_model);
        let denoiser = Denoiser::new(&mut store, &config.denoiser, channels, config.schedule.steps, z_dim, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            channels,
            grid,
            time_scale,
            normalization: NormalizationStats::identity(channels),
            store,
            schedule: make_schedule(&config.schedule)?,
            encoder,
            denoiser,
        })
    }

    /// Model sized for `batch`: channel count and median timestamp spacing.
    pub fn for_batch(config: &ModelConfig, batch: &TimeSeriesBatch, grid: FrequencyGrid, seed: u64) -> Result<Self> {
        let dt = batch.median_spacing().ok_or_else(|| Error::Invalid("cannot size a model from a batch without spacing".into()))?;
        Self::new(config, batch.dims().channels, grid, dt, seed)
    }

    pub fn n_parameters(&self) -> usize {
        self.store.n_values()
    }

    pub fn has_encoder(&self) -> bool {
        self.encoder.is_some()
    }

    /// `z_S` from the condition values, or `None` without an encoder.
    pub fn encode(&self, g: &mut Graph, values: Var, cond: &Conditioning) -> Result<Option<Var>> {
        self.encoder.as_ref().map(|e| e.forward(g, &self.store, values, cond, &self.grid)).transpose()
    }

    /// Encoder then denoiser on one graph.
    pub fn predict_eps(&self, g: &mut Graph, x_t: Var, cond: &Conditioning, t: &[usize]) -> Result<Var> {
        let x_co = g.constant(cond.tensor(cond.x_co.clone(), false));
        let z = self.encode(g, x_co, cond)?;
        self.denoise(g, x_t, cond, t, z)
    }

    pub fn denoise(&self, g: &mut Graph, x_t: Var, cond: &Conditioning, t: &[usize], z: Option<Var>) -> Result<Var> {
        ensure!(cond.dims.channels == self.channels, Shape, "model has {} channels, input {}", self.channels, cond.dims.channels);
        self.denoiser.forward(g, &self.store, x_t, cond, self.time_scale, t, z)
    }

    pub fn save(&self, stem: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = ModelMeta {
            config: self.config.clone(),
            channels: self.channels,
            grid: self.grid.clone(),
            time_scale: self.time_scale,
            normalization: self.normalization.clone(),
            extra,
        };
        let meta = serde_json::to_value(meta)?;
        save_checkpoint(&self.store, stem, meta)
    }

    /// Rebuilds the architecture from the checkpoint metadata and loads its values.
    pub fn load(stem: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Head {
            meta: ModelMeta,
        }
        let head: Head = crate::io::read_json(&stem.with_extension("json"))?;
        let m = head.meta;
        let mut model = Self::new(&m.config, m.channels, m.grid, m.time_scale, 0)?;
        model.normalization = m.normalization;
        load_checkpoint(&mut model.store, stem)?;
        ensure!(model.store.is_finite(), Invalid, "checkpoint {} holds non-finite parameters", stem.display());
        Ok(model)
    }
}
