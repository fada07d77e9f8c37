//! Condition / target splits of an observation mask.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::types::{Mask, TimeSeriesBatch};

/// How observed entries are assigned to the target side of a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitStrategy {
    /// Every observed entry becomes a target independently with probability `ratio`.
    #[default]
    UniformRandom,
    /// Each sample sends exactly `round(ratio * n_observed)` entries to the target,
    /// chosen uniformly without replacement.
    PerSampleRatio,
}

/// Disjoint condition and target masks carved from an observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalSplit {
    pub cond_mask: Mask,
    pub target_mask: Mask,
    /// Samples whose observation mask was empty (their target is empty too).
    pub empty_samples: Vec<usize>,
}

impl ConditionalSplit {
    /// Split from a known condition mask: `target = obs − cond`.
    pub fn from_condition(obs_mask: &Mask, cond_mask: Mask) -> Result<Self> {
        ensure!(
            cond_mask.is_subset_of(obs_mask),
            Invalid,
            "condition mask is not contained in the observation mask"
        );
        let target_mask = obs_mask.minus(&cond_mask);
        let d = obs_mask.dims();
        let empty_samples = (0..d.samples)
            .filter(|&b| obs_mask.count_sample(b) == 0)
            .collect();
        Ok(Self {
            cond_mask,
            target_mask,
            empty_samples,
        })
    }

    /// Condition = `obs`, no targets.
    pub fn all_condition(obs_mask: &Mask) -> Self {
        Self::from_condition(obs_mask, obs_mask.clone()).expect("mask is a subset of itself")
    }

    /// `cond ∪ target`, the observation mask the split was carved from.
    pub fn observed(&self) -> Mask {
        self.cond_mask.or(&self.target_mask)
    }

    pub fn select_samples(&self, samples: &[usize]) -> Self {
        let empty_samples = samples
            .iter()
            .enumerate()
            .filter(|(_, b)| self.empty_samples.contains(b))
            .map(|(i, _)| i)
            .collect();
        Self {
            cond_mask: self.cond_mask.select_samples(samples),
            target_mask: self.target_mask.select_samples(samples),
            empty_samples,
        }
    }
}

/// Split every sample with the same target ratio.
pub fn make_conditional_split(
    batch: &TimeSeriesBatch,
    strategy: SplitStrategy,
    ratio: f64,
    rng: &mut Rng,
) -> Result<ConditionalSplit> {
    let ratios = vec![ratio; batch.dims().samples];
    make_conditional_split_per_sample(batch, strategy, &ratios, rng)
}

/// Split with one target ratio per sample.
pub fn make_conditional_split_per_sample(
    batch: &TimeSeriesBatch,
    strategy: SplitStrategy,
    ratios: &[f64],
    rng: &mut Rng,
) -> Result<ConditionalSplit> {
    let d = batch.dims();
    ensure!(
        ratios.len() == d.samples,
        Shape,
        "{} ratios for {} samples",
        ratios.len(),
        d.samples
    );
    ensure!(
        ratios.iter().all(|r| (0.0..=1.0).contains(r)),
        Invalid,
        "split ratio outside [0, 1]"
    );
    let obs = batch.obs_mask();
    let mut target = Mask::empty(d);
    let per = d.channels * d.steps;
    for (b, &ratio) in ratios.iter().enumerate() {
        let base = b * per;
        let observed: Vec<usize> = (base..base + per).filter(|&i| obs.bits()[i]).collect();
        match strategy {
            SplitStrategy::UniformRandom => {
                for &i in &observed {
                    // Always draw so the stream does not depend on the ratio endpoints.
                    let u: f64 = rng.random();
                    target.bits_mut()[i] = u < ratio;
                }
            }
            SplitStrategy::PerSampleRatio => {
                let n = observed.len();
                let take = ((ratio * n as f64).round() as usize).min(n);
                for j in sample_indices(rng, n, take) {
                    target.bits_mut()[observed[j]] = true;
                }
            }
        }
    }
    let cond = obs.minus(&target);
    ConditionalSplit::from_condition(obs, cond)
}
