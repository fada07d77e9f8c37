//! Seeded missingness mechanisms applied on top of an existing observation mask.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{derive_seed, derived, seeded};
use crate::types::{Mask, TimeSeriesBatch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "kebab-case")]
pub enum Mechanism {
    /// Each observed entry dropped independently with probability `p`.
    Mcar { p: f64 },
    /// Contiguous windows of `seq_len` steps dropped until a fraction `p` of
    /// the observed entries is gone.
    Sequence { p: f64, seq_len: usize },
    /// `round(factor · B·K·L / (block_len·block_width))` rectangles at random
    /// anchors, overlaps allowed.
    Block { factor: f64, block_len: usize, block_width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSpec {
    #[serde(flatten)]
    pub mechanism: Mechanism,
    #[serde(default)]
    pub seed: u64,
}

impl MissingnessSpec {
    pub fn mcar(p: f64, seed: u64) -> Self {
        Self { mechanism: Mechanism::Mcar { p }, seed }
    }

    pub fn sequence(p: f64, seq_len: usize, seed: u64) -> Self {
        Self { mechanism: Mechanism::Sequence { p, seq_len }, seed }
    }

    pub fn block(factor: f64, block_len: usize, block_width: usize, seed: u64) -> Self {
        Self {
            mechanism: Mechanism::Block { factor, block_len, block_width },
            seed,
        }
    }

    /// Nominal rate (`p` or `factor`).
    pub fn rate(&self) -> f64 {
        match self.mechanism {
            Mechanism::Mcar { p } | Mechanism::Sequence { p, .. } => p,
            Mechanism::Block { factor, .. } => factor,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.mechanism {
            Mechanism::Mcar { .. } => "mcar",
            Mechanism::Sequence { .. } => "sequence",
            Mechanism::Block { .. } => "block",
        }
    }

    pub fn validate(&self, channels: usize, steps: usize) -> Result<()> {
        let r = self.rate();
        ensure!((0.0..=1.0).contains(&r), Invalid, "missing rate {r} outside [0, 1]");
        match self.mechanism {
            Mechanism::Mcar { .. } => {}
            Mechanism::Sequence { seq_len, .. } => {
                ensure!(seq_len >= 1 && seq_len <= steps, Invalid, "seq_len {seq_len} not in [1, {steps}]");
            }
            Mechanism::Block { block_len, block_width, .. } => {
                ensure!(block_len >= 1 && block_len <= steps, Invalid, "block_len {block_len} not in [1, {steps}]");
                ensure!(
                    block_width >= 1 && block_width <= channels,
                    Invalid,
                    "block_width {block_width} not in [1, {channels}]"
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MissingnessOutcome {
    pub batch: TimeSeriesBatch,
    /// Fraction of the originally observed entries that were dropped.
    pub achieved_rate: f64,
    /// Fraction of all entries missing afterwards.
    pub total_missing_rate: f64,
    pub warning: Option<String>,
}

pub fn apply_missingness(batch: &TimeSeriesBatch, spec: &MissingnessSpec) -> Result<MissingnessOutcome> {
    let d = batch.dims();
    spec.validate(d.channels, d.steps)?;
    let before = batch.obs_mask();
    let mut warning = None;
    let mask = match spec.mechanism {
        Mechanism::Mcar { p } => mcar(before, p, spec.seed),
        Mechanism::Sequence { p, seq_len } => {
            let (mask, short) = sequence(before, p, seq_len, spec.seed);
            warning = short;
            mask
        }
        Mechanism::Block { factor, block_len, block_width } => {
            block(before, factor, block_len, block_width, spec.seed)
        }
    };
    let n_before = before.count();
    let n_after = mask.count();
    let achieved_rate = if n_before == 0 {
        0.0
    } else {
        (n_before - n_after) as f64 / n_before as f64
    };
    let total_missing_rate = if d.is_empty() {
        0.0
    } else {
        1.0 - n_after as f64 / d.len() as f64
    };
    Ok(MissingnessOutcome {
        batch: batch.with_mask(mask)?,
        achieved_rate,
        total_missing_rate,
        warning,
    })
}

fn mcar(before: &Mask, p: f64, seed: u64) -> Mask {
    let d = before.dims();
    let per_sample = d.channels * d.steps;
    let mut mask = before.clone();
    if per_sample == 0 {
        return mask;
    }
    mask.bits_mut()
        .par_chunks_mut(per_sample)
        .enumerate()
        .for_each(|(b, bits)| {
            let mut rng = derived(seed, b as u64);
            for bit in bits.iter_mut() {
                let u: f64 = rng.random();
                if *bit && u < p {
                    *bit = false;
                }
            }
        });
    mask
}

/// Candidate windows are `(b, k, anchor)` triples, each given a priority
/// from its sample's derived stream. Windows are visited in global priority
/// order and accepted when they do not overlap an earlier window of the same
/// row, until the global target is met or candidates run out.
fn sequence(before: &Mask, p: f64, seq_len: usize, seed: u64) -> (Mask, Option<String>) {
    let d = before.dims();
    let target = (p * before.count() as f64).round() as usize;
    let mut mask = before.clone();
    if target == 0 {
        return (mask, None);
    }
    let anchors = d.steps - seq_len + 1;
    let mut candidates: Vec<(f64, usize, usize, usize)> = (0..d.samples)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = derived(seed, b as u64);
            let mut out = Vec::with_capacity(d.channels * anchors);
            for k in 0..d.channels {
                for a in 0..anchors {
                    out.push((rng.random::<f64>(), b, k, a));
                }
            }
            out
        })
        .collect();
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2, x.3).cmp(&(y.1, y.2, y.3))));

    let mut taken = vec![false; d.len()];
    let mut dropped = 0usize;
    for &(_, b, k, a) in &candidates {
        if dropped >= target {
            break;
        }
        let start = d.index(b, k, a);
        let window = start..start + seq_len;
        if taken[window.clone()].iter().any(|&t| t) {
            continue;
        }
        for i in window {
            taken[i] = true;
            if mask.bits()[i] {
                mask.bits_mut()[i] = false;
                dropped += 1;
            }
        }
    }
    let warning = (dropped < target).then(|| {
        format!(
            "sequence windows exhausted: dropped {dropped} of {target} targeted entries ({:.1}% of observed)",
            100.0 * dropped as f64 / before.count() as f64
        )
    });
    (mask, warning)
}

fn block(before: &Mask, factor: f64, block_len: usize, block_width: usize, seed: u64) -> Mask {
    let d = before.dims();
    let n_blocks = (factor * d.len() as f64 / (block_len * block_width) as f64).round() as usize;
    let mut mask = before.clone();
    let mut rng = seeded(derive_seed(seed, u64::MAX));
    for _ in 0..n_blocks {
        let b = rng.random_range(0..d.samples);
        let k0 = rng.random_range(0..=d.channels - block_width);
        let l0 = rng.random_range(0..=d.steps - block_len);
        for k in k0..k0 + block_width {
            for l in l0..l0 + block_len {
                mask.set(b, k, l, false);
            }
        }
    }
    mask
}

/// Uniformly shuffled sample indices.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    idx
}
