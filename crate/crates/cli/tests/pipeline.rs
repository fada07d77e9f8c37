use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lscd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lscd")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lscd(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn rerun_gives_byte_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&a)]);
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&b)]);
    for f in ["results.csv", "report.csv", "masked.json", "predictions_lscd.json", "model/loss_trace.jsonl"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty(), "{f} empty");
        assert!(x == y, "{f} differs between runs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn seed_override_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-sines", "--config", s(&cfg), "--out-dir", s(&a)]);
    ok(&["gen-sines", "--config", s(&cfg), "--out-dir", s(&b), "--seed-override", "8"]);
    assert_ne!(std::fs::read(a.join("dataset.json")).unwrap(), std::fs::read(b.join("dataset.json")).unwrap());
}

#[test]
fn table_has_every_method_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["run", "--config", s(&tiny_config()), "--out-dir", s(dir.path())]);
    assert!(out.contains("| Mean | Lerp | LSCD |"), "{out}");
    for metric in ["MAE", "RMSE", "S-MAE", "LFE"] {
        assert!(out.contains(&format!("| {metric} |")), "{out}");
    }
}

#[test]
fn eval_of_truth_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, d) = (tiny_config(), dir.path());
    ok(&["gen-sines", "--config", s(&cfg), "--out-dir", s(d)]);
    let (truth, masked) = (d.join("dataset.json"), d.join("masked.json"));
    ok(&["mask", "--config", s(&cfg), "--input", s(&truth), "--out-dir", s(d)]);
    ok(&["eval", "--config", s(&cfg), "--truth", s(&truth), "--masked", s(&masked), "--pred", s(&truth), "--method", "Truth", "--out-dir", s(d)]);
    let mut r = csv::Reader::from_path(d.join("results.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        assert_eq!(&row[4], "Truth");
        assert_eq!(row[6].parse::<f64>().unwrap(), 0.0, "{row:?}");
    }
}

#[test]
fn stepwise_commands_match_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, d) = (tiny_config(), dir.path());
    let full = d.join("full");
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&full)]);
    let st = d.join("steps");
    let (truth, masked) = (st.join("dataset.json"), st.join("masked.json"));
    ok(&["gen-sines", "--config", s(&cfg), "--out-dir", s(&st)]);
    ok(&["mask", "--config", s(&cfg), "--input", s(&truth), "--out-dir", s(&st)]);
    ok(&["train", "--config", s(&cfg), "--input", s(&masked), "--out-dir", s(&st)]);
    ok(&["finetune", "--config", s(&cfg), "--input", s(&masked), "--model", s(&st.join("model/model")), "--out-dir", s(&st)]);
    ok(&["impute", "--config", s(&cfg), "--input", s(&masked), "--model", s(&st.join("finetune/model")), "--out-dir", s(&st)]);
    assert_eq!(
        std::fs::read(st.join("predictions_lscd.json")).unwrap(),
        std::fs::read(full.join("predictions_lscd.json")).unwrap()
    );
    ok(&["psd", "--config", s(&cfg), "--input", s(&masked), "--out-dir", s(&st)]);
    let psd = std::fs::read_to_string(st.join("periodogram.csv")).unwrap();
    assert!(psd.starts_with("sample,channel,omega,power,fap\n"));
    let summary = ok(&[
        "compare-spectra", "--config", s(&cfg), "--truth", s(&truth), "--masked", s(&masked),
        "--pred", s(&st.join("predictions_lscd.json")), "--out-dir", s(&st),
    ]);
    assert!(summary.contains("LS strictly better"));
    let curves = std::fs::read_to_string(st.join("psd_difference.csv")).unwrap();
    assert!(curves.lines().any(|l| l.starts_with("LSCD,")));
    let hist = std::fs::read_to_string(st.join("leading_frequency_hist.csv")).unwrap();
    assert!(hist.lines().any(|l| l.starts_with("FFT+Lerp,")));
    for m in ["gen-sines", "mask", "train", "finetune", "impute", "psd", "compare-spectra"] {
        assert!(st.join(format!("{m}.manifest.json")).exists(), "{m} manifest missing");
    }
}

#[test]
fn failures_exit_nonzero_with_structured_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("missing.json");
    let out = lscd(&["mask", "--input", s(&missing), "--out-dir", s(d)]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("missing.json"));

    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"dataset": {"n_samples": 3}}"#).unwrap();
    let out = lscd(&["gen-sines", "--config", s(&bad), "--out-dir", s(d)]);
    assert_eq!(out.status.code(), Some(4));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "json");

    let out = lscd(&["impute", "--input", s(&missing), "--out-dir", s(d)]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn nan_predictions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, d) = (tiny_config(), dir.path());
    ok(&["gen-sines", "--config", s(&cfg), "--out-dir", s(d)]);
    let truth = d.join("dataset.json");
    ok(&["mask", "--config", s(&cfg), "--input", s(&truth), "--out-dir", s(d)]);
    // Masked data has nulls where values are missing, which read back as NaN.
    let out = lscd(&["eval", "--config", s(&cfg), "--truth", s(&truth), "--masked", s(&d.join("masked.json")), "--pred", s(&d.join("masked.json")), "--out-dir", s(d)]);
    assert_eq!(out.status.code(), Some(5));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "non-finite");
}

#[test]
fn shipped_desk_config_is_the_reduced_benchmark() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk-sines.json");
    let cfg = lscd::experiment::ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.dataset.sines.n_samples, 500);
    assert_eq!(cfg.dataset.sines.channels, lscd::synth::default_channel_specs()[..2].to_vec());
    assert_eq!(cfg.missingness, lscd::missingness::MissingnessSpec::mcar(0.5, cfg.missingness.seed));
    assert!(cfg.train.epochs <= 100);
    assert_eq!(cfg.eval.methods.len(), 3);
}
