//! On-disk containers for batches, splits and generic JSON documents.
//!
//! Batches are written either as a nested JSON document
//! `{"values", "timestamps", "obs_mask", "meta"}` or as a flat CSV with one
//! row per entry (`sample_id, channel, step, time, value, observed`). Both
//! round-trip exactly; non-finite values become `null` in JSON.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{ensure, Error, Result};
use crate::split::ConditionalSplit;
use crate::types::{Dims, Mask, TimeSeriesBatch};

pub type Meta = Map<String, Value>;

#[derive(Serialize, Deserialize)]
struct BatchDoc {
    values: Vec<Vec<Vec<Option<f64>>>>,
    timestamps: Vec<Vec<f64>>,
    obs_mask: Vec<Vec<Vec<u8>>>,
    #[serde(default)]
    meta: Meta,
}

#[derive(Serialize, Deserialize)]
struct SplitDoc {
    cond_mask: Vec<Vec<Vec<u8>>>,
    target_mask: Vec<Vec<Vec<u8>>>,
}

fn nest<T: Copy, U>(flat: &[T], d: Dims, f: impl Fn(T) -> U) -> Vec<Vec<Vec<U>>> {
    (0..d.samples)
        .map(|b| {
            (0..d.channels)
                .map(|k| flat[d.row(b, k)].iter().map(|&x| f(x)).collect())
                .collect()
        })
        .collect()
}

fn dims_of<T>(nested: &[Vec<Vec<T>>]) -> Result<Dims> {
    let samples = nested.len();
    let channels = nested.first().map_or(0, Vec::len);
    let steps = nested
        .first()
        .and_then(|c| c.first())
        .map_or(0, Vec::len);
    for (b, chans) in nested.iter().enumerate() {
        ensure!(chans.len() == channels, Shape, "sample {b} has {} channels", chans.len());
        for (k, row) in chans.iter().enumerate() {
            ensure!(row.len() == steps, Shape, "sample {b} channel {k} has {} steps", row.len());
        }
    }
    Ok(Dims::new(samples, channels, steps))
}

fn flatten<T: Copy>(nested: &[Vec<Vec<T>>]) -> Vec<T> {
    nested.iter().flatten().flatten().copied().collect()
}

fn mask_from_nested(nested: &[Vec<Vec<u8>>]) -> Result<Mask> {
    let d = dims_of(nested)?;
    let flat = flatten(nested);
    ensure!(flat.iter().all(|&m| m <= 1), Invalid, "mask entries must be 0 or 1");
    Mask::from_bits(d, flat.into_iter().map(|m| m == 1).collect())
}

fn mask_to_nested(mask: &Mask) -> Vec<Vec<Vec<u8>>> {
    nest(mask.bits(), mask.dims(), u8::from)
}

pub fn batch_to_json(batch: &TimeSeriesBatch, meta: &Meta) -> Result<String> {
    let d = batch.dims();
    let doc = BatchDoc {
        values: nest(batch.values(), d, |v: f64| v.is_finite().then_some(v)),
        timestamps: (0..d.samples).map(|b| batch.times(b).to_vec()).collect(),
        obs_mask: mask_to_nested(batch.obs_mask()),
        meta: meta.clone(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn batch_from_json(text: &str) -> Result<(TimeSeriesBatch, Meta)> {
    let doc: BatchDoc = serde_json::from_str(text)?;
    let d = dims_of(&doc.values)?;
    let mask = mask_from_nested(&doc.obs_mask)?;
    ensure!(mask.dims() == d, Shape, "obs_mask dims {:?} differ from values {:?}", mask.dims(), d);
    ensure!(
        doc.timestamps.len() == d.samples && doc.timestamps.iter().all(|t| t.len() == d.steps),
        Shape,
        "timestamps must be [{}][{}]",
        d.samples,
        d.steps
    );
    let values = flatten(&doc.values)
        .into_iter()
        .map(|v| v.unwrap_or(f64::NAN))
        .collect();
    let timestamps = doc.timestamps.into_iter().flatten().collect();
    Ok((TimeSeriesBatch::new(d, values, timestamps, mask)?, doc.meta))
}

pub fn write_batch_json(path: &Path, batch: &TimeSeriesBatch, meta: &Meta) -> Result<()> {
    write_text(path, &batch_to_json(batch, meta)?)
}

pub fn read_batch_json(path: &Path) -> Result<(TimeSeriesBatch, Meta)> {
    batch_from_json(&read_text(path)?)
}

const CSV_HEADER: [&str; 6] = ["sample_id", "channel", "step", "time", "value", "observed"];

struct CsvRow {
    sample_id: usize,
    channel: usize,
    step: usize,
    time: f64,
    value: f64,
    observed: u8,
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("bad {} field {raw:?}", CSV_HEADER[i])))
}

pub fn write_batch_csv(path: &Path, batch: &TimeSeriesBatch) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(CSV_HEADER)?;
    let d = batch.dims();
    for b in 0..d.samples {
        let times = batch.times(b);
        for k in 0..d.channels {
            for (l, &time) in times.iter().enumerate() {
                let i = d.index(b, k, l);
                // `Display` for f64 prints the shortest string that parses back exactly.
                w.write_record([
                    b.to_string(),
                    k.to_string(),
                    l.to_string(),
                    time.to_string(),
                    batch.values()[i].to_string(),
                    u8::from(batch.obs_mask().bits()[i]).to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Rows may come in any order but must cover the full `B × K × L` grid.
pub fn read_batch_csv(path: &Path) -> Result<TimeSeriesBatch> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let rows = r
        .records()
        .map(|rec| {
            let rec = rec?;
            Ok(CsvRow {
                sample_id: parse_field(&rec, 0)?,
                channel: parse_field(&rec, 1)?,
                step: parse_field(&rec, 2)?,
                time: parse_field(&rec, 3)?,
                value: parse_field(&rec, 4)?,
                observed: parse_field(&rec, 5)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ensure!(!rows.is_empty(), Invalid, "{} has no rows", path.display());
    let samples = rows.iter().map(|r| r.sample_id).max().unwrap_or(0) + 1;
    let channels = rows.iter().map(|r| r.channel).max().unwrap_or(0) + 1;
    let steps = rows.iter().map(|r| r.step).max().unwrap_or(0) + 1;
    let d = Dims::new(samples, channels, steps);
    ensure!(rows.len() == d.len(), Shape, "{} rows for a {:?} grid", rows.len(), d);
    let mut values = vec![f64::NAN; d.len()];
    let mut bits = vec![false; d.len()];
    let mut times = vec![f64::NAN; samples * steps];
    let mut seen = vec![false; d.len()];
    for row in rows {
        let i = d.index(row.sample_id, row.channel, row.step);
        ensure!(!seen[i], Invalid, "duplicate row for ({}, {}, {})", row.sample_id, row.channel, row.step);
        seen[i] = true;
        ensure!(row.observed <= 1, Invalid, "observed must be 0 or 1");
        values[i] = row.value;
        bits[i] = row.observed == 1;
        let ti = row.sample_id * steps + row.step;
        ensure!(
            times[ti].is_nan() || times[ti] == row.time,
            Invalid,
            "inconsistent time for sample {} step {}",
            row.sample_id,
            row.step
        );
        times[ti] = row.time;
    }
    TimeSeriesBatch::new(d, values, times, Mask::from_bits(d, bits)?)
}

pub fn split_to_json(split: &ConditionalSplit) -> Result<String> {
    Ok(serde_json::to_string(&SplitDoc {
        cond_mask: mask_to_nested(&split.cond_mask),
        target_mask: mask_to_nested(&split.target_mask),
    })?)
}

pub fn split_from_json(text: &str) -> Result<ConditionalSplit> {
    let doc: SplitDoc = serde_json::from_str(text)?;
    let cond = mask_from_nested(&doc.cond_mask)?;
    let target = mask_from_nested(&doc.target_mask)?;
    ensure!(cond.dims() == target.dims(), Shape, "split masks differ in shape");
    ensure!(cond.and(&target).count() == 0, Invalid, "condition and target masks overlap");
    ConditionalSplit::from_condition(&cond.or(&target), cond)
}

pub fn write_split_json(path: &Path, split: &ConditionalSplit) -> Result<()> {
    write_text(path, &split_to_json(split)?)
}

pub fn read_split_json(path: &Path) -> Result<ConditionalSplit> {
    split_from_json(&read_text(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
