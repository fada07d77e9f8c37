use lscd::experiment::{self as exp, ExperimentConfig, Method, Partition};
use lscd::lombscargle::{false_alarm_probability, periodogram, MaskSelector};
use lscd::missingness::{apply_missingness, MissingnessSpec};
use lscd::spectrum::argmax_lowest;
use lscd::synth::{default_channel_specs, generate_sines, SineChannelSpec, SinesConfig};
use lscd::{FrequencyGrid, TimeSeriesBatch};

fn sines(n: usize, channels: Vec<SineChannelSpec>, seed: u64) -> (TimeSeriesBatch, lscd::synth::GroundTruth) {
    let cfg = SinesConfig { n_samples: n, channels, seed, ..Default::default() };
    let d = generate_sines(&cfg).unwrap();
    (d.batch, d.truth)
}

#[test]
fn sampled_frequencies_center_on_the_channel_mean() {
    let spec = SineChannelSpec::new(&[2.0], &[1.5], &[1.0]);
    let (_, truth) = sines(10_000, vec![spec], 5);
    let mean = truth.freqs.iter().map(|s| s[0][0]).sum::<f64>() / 10_000.0;
    assert!((mean - 2.0).abs() < 0.02, "mean frequency {mean}");
}

#[test]
fn periodogram_finds_the_first_channel_frequency() {
    let (batch, truth) = sines(400, default_channel_specs()[..1].to_vec(), 6);
    let grid = FrequencyGrid::default_for(&batch).unwrap();
    let p = periodogram(&batch, MaskSelector::Observed, &grid, true).unwrap();
    let f = grid.frequencies_hz();
    let bin = f[1] - f[0];
    let hits = (0..400)
        .filter(|&b| (f[argmax_lowest(p.row(b, 0)).unwrap()] - truth.leading_frequency(b, 0)).abs() <= bin)
        .count();
    assert!(hits as f64 >= 0.95 * 400.0, "{hits} of 400 within one bin");
}

#[test]
fn false_alarm_probabilities_are_probabilities() {
    let (batch, _) = sines(50, default_channel_specs(), 7);
    let grid = FrequencyGrid::default_for(&batch).unwrap();
    let p = periodogram(&batch, MaskSelector::Observed, &grid, true).unwrap();
    let fap = false_alarm_probability(&p, grid.len() as f64).unwrap();
    assert!(fap.fap.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(fap.weights.iter().all(|&w| w > 0.0 && w.is_finite()));
}

#[test]
fn mcar_half_on_ten_thousand_entries() {
    let (batch, _) = sines(20, default_channel_specs(), 8);
    assert_eq!(batch.obs_mask().count(), 10_000);
    let out = apply_missingness(&batch, &MissingnessSpec::mcar(0.5, 9)).unwrap();
    assert!((out.achieved_rate - 0.5).abs() <= 0.01, "{}", out.achieved_rate);
}

#[test]
fn block_rate_on_the_default_shape() {
    let cfg = ExperimentConfig::default().with_seed(3);
    let data = exp::generate(&cfg).unwrap();
    let out = apply_missingness(&data.batch, &MissingnessSpec::block(0.1, 40, 4, 4)).unwrap();
    assert!((out.total_missing_rate - 0.188).abs() <= 0.03, "{}", out.total_missing_rate);
}

#[test]
fn config_round_trips_and_hashes_stably() {
    let cfg = ExperimentConfig::default().with_seed(11);
    let text = serde_json::to_string(&cfg).unwrap();
    let back = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(back.hash(), cfg.resolved().hash());
    assert_eq!(back.run_id().len(), 12);
    assert_ne!(cfg.hash(), cfg.clone().with_seed(12).hash());
    assert!(ExperimentConfig::from_json(r#"{"seed": 1, "surprise": true}"#).is_err());
    assert_eq!("lscd".parse::<Method>().unwrap(), Method::Lscd);
    assert!("median".parse::<Method>().is_err());
}

#[test]
fn partition_covers_samples_once() {
    let cfg = ExperimentConfig::default().with_seed(2).resolved();
    let p = Partition::new(2000, &cfg).unwrap();
    assert_eq!((p.train.len(), p.val.len(), p.test.len()), (1400, 200, 400));
    let mut all: Vec<usize> = p.train.iter().chain(&p.val).chain(&p.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..2000).collect::<Vec<_>>());
    assert_eq!(Partition::new(2000, &cfg).unwrap().test, p.test);
}

#[test]
fn generated_data_carries_the_initial_missingness() {
    let cfg = ExperimentConfig::default().with_seed(4);
    let data = exp::generate(&cfg).unwrap();
    let total = data.batch.dims().len() as f64;
    let missing = 1.0 - data.batch.obs_mask().count() as f64 / total;
    assert!((missing - 0.1).abs() < 0.01, "{missing}");
    let again = exp::generate(&cfg).unwrap();
    assert_eq!(again.batch, data.batch);
}
