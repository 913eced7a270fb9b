//! Random Count Augmentation.
//!
//! Sequences whose count reaches the threshold `tau` are, with probability
//! `prob`, cut down to a count drawn uniformly from `1..=floor(tau)`. The
//! cut keeps the first cycles and half of the interval that follows the
//! last kept one. Sequences below the threshold pass through untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sequence::FeatureSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcaConfig {
    pub tau: f64,
    pub prob: f64,
    pub seed: u64,
}

impl RcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("rca tau must be >= 1, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Config(format!("rca prob must lie in [0, 1], got {}", self.prob)));
        }
        Ok(())
    }
}

/// Mean ground-truth count over a dataset.
pub fn compute_tau(dataset: &[FeatureSequence]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("cannot average counts of an empty dataset".into()));
    }
    Ok(dataset.iter().map(|s| s.count as f64).sum::<f64>() / dataset.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcaOutcome {
    pub sequence: FeatureSequence,
    /// Whether the count was resampled.
    pub resampled: bool,
}

pub fn rca_apply(seq: &FeatureSequence, cfg: &RcaConfig, rng: &mut SplitMix64) -> Result<RcaOutcome> {
    cfg.validate()?;
    let unchanged = || RcaOutcome {
        sequence: seq.clone(),
        resampled: false,
    };
    if (seq.count as f64) < cfg.tau || !rng.gen_bool(cfg.prob) {
        return Ok(unchanged());
    }
    let top = cfg.tau.floor() as usize;
    let new_count = rng.gen_range(1..=top).min(seq.count);
    Ok(RcaOutcome {
        sequence: crop_to_count(seq, new_count)?,
        resampled: true,
    })
}

/// First `count` cycles of `seq`, cut halfway through the following interval.
pub fn crop_to_count(seq: &FeatureSequence, count: usize) -> Result<FeatureSequence> {
    if count == 0 || count > seq.count {
        return Err(Error::Config(format!(
            "cannot crop {} cycles down to {count}",
            seq.count
        )));
    }
    let len = seq.len();
    let last = seq.cycles[count - 1];
    let next_start = seq.cycles.get(count).map_or(len, |c| c.start);
    let gap = next_start - last.end - 1;
    let cut = (last.end + gap / 2).min(len - 1);
    let features = seq.features.slice_rows(0, cut + 1)?;
    FeatureSequence::new(seq.id.clone(), features, seq.cycles[..count].to_vec())
}
