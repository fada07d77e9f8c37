use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lscd::compare::{write_comparison, Candidate};
use lscd::diffusion::LscdModel;
use lscd::experiment::{self as exp, files, ExperimentConfig, Method, Partition};
use lscd::lombscargle::{false_alarm_probability, periodogram, write_periodogram_csv, MaskSelector};
use lscd::manifest::Manifest;
use lscd::metrics::{append_results_csv, read_results_csv};
use lscd::report::{to_markdown, write_report};

/// Imputation of irregularly sampled time series with Lomb–Scargle
/// conditioned diffusion, plus the synthetic benchmark around it.
#[derive(Parser)]
#[command(name = "lscd", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Replaces the config's top-level seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads (all cores by default).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic sines dataset.
    GenSines,
    /// Apply the configured missingness mechanism to a dataset.
    Mask {
        #[arg(long)]
        input: PathBuf,
    },
    /// Lomb–Scargle periodogram with false-alarm probabilities, as CSV.
    Psd {
        #[arg(long)]
        input: PathBuf,
        /// Keep the per-row mean instead of subtracting it.
        #[arg(long)]
        no_center: bool,
    },
    /// Leading-frequency histograms and PSD-difference curves.
    CompareSpectra {
        /// Fully observed dataset written by gen-sines.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        masked: PathBuf,
        /// Prediction files written by impute.
        #[arg(long = "pred")]
        preds: Vec<PathBuf>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Train a diffusion imputer on the training part of a masked dataset.
    Train {
        #[arg(long)]
        input: PathBuf,
    },
    /// Fine-tune a trained model with the spectral-consistency loss.
    Finetune {
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint stem, e.g. `out/model/model`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Fill the missing entries of the test samples.
    Impute {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "lscd")]
        method: Method,
        /// Checkpoint stem; required for lscd.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score predictions against the truth and append rows to results.csv.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        masked: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Method name for the rows; taken from the prediction file otherwise.
        #[arg(long)]
        method: Option<String>,
    },
    /// Aggregate results files into a table.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Whole pipeline: generate, mask, train, impute, evaluate, report.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<lscd::Error>().map_or("error", lscd::Error::kind);
            let mut message = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !message.ends_with(&cause) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&cause);
                }
            }
            eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
            ExitCode::from(match kind {
                "io" => 3,
                "json" | "csv" | "shape" | "invalid" => 4,
                "non-finite" | "diverged" => 5,
                _ => 1,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed_override {
        cfg = cfg.with_seed(seed);
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    let out = c.out_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    match cli.command {
        Command::Run => {
            let outcome = exp::run(&cfg, out)?;
            print!("{}", to_markdown(&lscd::report::aggregate(&outcome.rows)));
            Ok(())
        }
        Command::GenSines => {
            let data = exp::generate(&cfg)?;
            let path = out.join(files::DATASET);
            exp::write_dataset(&path, &data)?;
            finish("gen-sines", &cfg, out, &[], &[path])
        }
        Command::Mask { input } => {
            let (truth, _) = exp::read_dataset(&input)?;
            let outcome = exp::mask(&cfg, &truth)?;
            if let Some(w) = &outcome.warning {
                eprintln!("warning: {w}");
            }
            let path = out.join(files::MASKED);
            exp::write_masked(&path, &outcome)?;
            println!("achieved rate {:.4}, total missing {:.4}", outcome.achieved_rate, outcome.total_missing_rate);
            let notes = serde_json::json!({
                "achieved_rate": outcome.achieved_rate,
                "total_missing_rate": outcome.total_missing_rate,
            });
            finish_with("mask", &cfg, out, &[input], &[path], notes)
        }
        Command::Psd { input, no_center } => {
            let batch = exp::read_masked(&input)?;
            let grid = cfg.grid.resolve(&batch)?;
            let p = periodogram(&batch, MaskSelector::Observed, &grid, !no_center)?;
            let fap = false_alarm_probability(&p, cfg.model.encoder.as_ref().map(|e| e.feature).unwrap_or_default().j_eff_for(grid.len()))?;
            let path = out.join("periodogram.csv");
            write_periodogram_csv(&path, &p, &fap)?;
            finish("psd", &cfg, out, &[input], &[path])
        }
        Command::CompareSpectra { truth, masked, preds, bins } => {
            let (truth_batch, generating) = exp::read_dataset(&truth)?;
            let generating = generating.context("truth file carries no generating parameters; use gen-sines output")?;
            let masked_batch = exp::read_masked(&masked)?;
            let grid = cfg.grid.resolve(&truth_batch)?;
            let mut candidates = Vec::new();
            for p in &preds {
                let exp::Predictions { values, samples, method } = exp::read_predictions(p)?;
                let samples = samples.unwrap_or_else(|| (0..truth_batch.dims().samples).collect());
                let name = method.unwrap_or_else(|| p.display().to_string());
                candidates.push(Candidate { name, samples, values });
            }
            let s = write_comparison(out, &truth_batch, &generating, &masked_batch, &candidates, &grid, bins)?;
            println!(
                "leading-frequency error: LS {:.4} Hz, FFT+Lerp {:.4} Hz; LS strictly better on {:.1}% of {} rows",
                s.ls_mean_error,
                s.fft_mean_error,
                100.0 * s.ls_strictly_better,
                s.rows
            );
            let mut inputs = vec![truth, masked];
            inputs.extend(preds);
            let outputs = ["leading_frequency.csv", "leading_frequency_hist.csv", "psd_difference.csv"].map(|f| out.join(f));
            finish("compare-spectra", &cfg, out, &inputs, &outputs)
        }
        Command::Train { input } => {
            let masked = exp::read_masked(&input)?;
            let dir = out.join(files::MODEL_DIR);
            let (_, report) = exp::train(&cfg, &masked, &dir)?;
            let part = Partition::new(masked.dims().samples, &cfg)?;
            lscd::io::write_json(&out.join(files::PARTITION), &part)?;
            println!("trained {} steps; best epoch {:?}, validation loss {:?}", report.steps, report.best_epoch, report.best_val);
            finish("train", &cfg, out, &[input], &[dir.join("loss_trace.jsonl")])
        }
        Command::Finetune { input, model } => {
            let masked = exp::read_masked(&input)?;
            let mut m = LscdModel::load(&model).with_context(|| format!("loading model {}", model.display()))?;
            let dir = out.join(files::FINETUNE_DIR);
            let report = exp::finetune(&cfg, &mut m, &masked, &dir)?;
            println!("fine-tuned {} steps; best epoch {:?}, validation loss {:?}", report.steps, report.best_epoch, report.best_val);
            finish("finetune", &cfg, out, &[input], &[dir.join("loss_trace.jsonl")])
        }
        Command::Impute { input, method, model } => {
            let (raw, _) = lscd::io::read_batch_json(&input)?;
            let masked = raw.zero_unobserved();
            let loaded = match (method, &model) {
                (Method::Lscd, None) => bail!("--model is required for lscd imputation"),
                (_, Some(p)) => Some(LscdModel::load(p).with_context(|| format!("loading model {}", p.display()))?),
                _ => None,
            };
            let part = Partition::new(masked.dims().samples, &cfg)?;
            let pred = exp::impute(&cfg, method, loaded.as_ref(), &masked, &part.test)?;
            let path = out.join(files::predictions(method));
            exp::write_predictions(&path, &raw, &part.test, method, pred)?;
            let mut inputs = vec![input];
            inputs.extend(model.map(|m| m.with_extension("bin")));
            finish("impute", &cfg, out, &inputs, &[path])
        }
        Command::Eval { truth, masked, pred, method } => {
            let (truth_batch, _) = exp::read_dataset(&truth)?;
            let masked_batch = exp::read_masked(&masked)?;
            let exp::Predictions { values, samples, method: file_method } = exp::read_predictions(&pred)?;
            let samples = samples.unwrap_or_else(|| (0..truth_batch.dims().samples).collect());
            let method = method.or(file_method).unwrap_or_else(|| "unnamed".into());
            let report = exp::score(&truth_batch, &masked_batch, &samples, &values, &cfg.grid)?;
            let rows = exp::result_rows(&cfg, &method, &report);
            let path = out.join(files::RESULTS);
            append_results_csv(&path, &rows)?;
            for (name, v) in report.metrics() {
                println!("{method} {name} {v}");
            }
            finish("eval", &cfg, out, &[truth, masked, pred], &[path])
        }
        Command::Report { inputs } => {
            let mut rows = Vec::new();
            for p in &inputs {
                rows.extend(read_results_csv(p).with_context(|| format!("reading {}", p.display()))?);
            }
            if rows.is_empty() {
                bail!("no result rows in the given files");
            }
            let table = write_report(out, &rows)?;
            print!("{}", to_markdown(&table));
            finish("report", &cfg, out, &inputs, &[out.join("report.csv")])
        }
    }
}

fn finish(command: &str, cfg: &ExperimentConfig, out: &Path, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    finish_with(command, cfg, out, inputs, outputs, serde_json::json!({}))
}

fn finish_with(
    command: &str,
    cfg: &ExperimentConfig,
    out: &Path,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    notes: serde_json::Value,
) -> Result<()> {
    let mut m = Manifest::new(command, cfg)?;
    if let serde_json::Value::Object(map) = notes {
        m.notes = map;
    }
    for p in inputs {
        m.input(p)?;
    }
    for p in outputs {
        m.output(p)?;
    }
    m.write(&out.join(format!("{command}.manifest.json")))?;
    Ok(())
}
