//! Synthetic irregular repetitive feature sequences.
//!
//! A motif is a constant offset plus three random Fourier harmonics over one
//! cycle phase. Each sequence draws its motif from a small bank shared by the
//! whole dataset (`motif_classes`, the analogue of action classes), or a fresh
//! one when the bank is empty. Cycles replay the motif under a random monotone
//! time warp and amplitude scale. Non-cycle frames drift slowly around a
//! damped copy of the motif offset ("rest"), or, with probability
//! `distractor_prob` per interval, sweep once through an unrelated motif.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SplitMix64};
use crate::sequence::{intervals_between, CycleSpan, FeatureSequence};
use crate::tensor::Tensor;

const HARMONICS: usize = 3;
const PLACEMENT_ATTEMPTS: usize = 100;
const REST_LEVEL: f64 = 0.3;
const DRIFT_STD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Frames per sequence.
    pub len: usize,
    pub feature_dim: usize,
    pub count_range: [usize; 2],
    pub cycle_len_range: [usize; 2],
    /// Length range of the gaps between consecutive cycles. Leftover
    /// frames become leading and trailing intervals.
    pub interval_len_range: [usize; 2],
    pub noise_std: f64,
    pub warp_strength: f64,
    pub distractor_prob: f64,
    /// Size of the shared motif bank each sequence draws its action from;
    /// 0 gives every sequence a fresh motif.
    pub motif_classes: usize,
    pub seed: u64,
    /// Sequences in a generated suite, before splitting.
    pub sequences: usize,
    pub split: SplitFractions,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            len: 64,
            feature_dim: 16,
            count_range: [1, 6],
            cycle_len_range: [4, 10],
            interval_len_range: [1, 5],
            noise_std: 0.1,
            warp_strength: 0.5,
            distractor_prob: 0.5,
            motif_classes: 3,
            seed: 0,
            sequences: 200,
            split: SplitFractions::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        for (name, [lo, hi]) in [
            ("count_range", self.count_range),
            ("cycle_len_range", self.cycle_len_range),
            ("interval_len_range", self.interval_len_range),
        ] {
            if lo > hi {
                return bad(&format!("{name} is empty"));
            }
        }
        if self.len == 0 || self.feature_dim == 0 {
            return bad("len and feature_dim must be positive");
        }
        if self.cycle_len_range[0] == 0 {
            return bad("cycles need at least one frame");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.warp_strength) {
            return bad("warp_strength must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return bad("distractor_prob must lie in [0, 1]");
        }
        let most = self.count_range[1];
        let tightest =
            most * self.cycle_len_range[0] + most.saturating_sub(1) * self.interval_len_range[0];
        if tightest > self.len {
            return bad(&format!(
                "{most} cycles need at least {tightest} frames but sequences have {}",
                self.len
            ));
        }
        Ok(())
    }
}

/// Sequences generated under one configuration.
#[derive(Clone, Debug)]
pub struct GenDataset {
    pub sequences: Vec<FeatureSequence>,
    pub config: GenConfig,
}

struct Motif {
    offset: Vec<f64>,
    /// `[dim][harmonic]` amplitude and phase.
    amp: Vec<[f64; HARMONICS]>,
    phase: Vec<[f64; HARMONICS]>,
}

impl Motif {
    fn sample(rng: &mut SplitMix64, dim: usize) -> Self {
        let offset = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut amp = Vec::with_capacity(dim);
        let mut phase = Vec::with_capacity(dim);
        for _ in 0..dim {
            let mut a = [0.0; HARMONICS];
            let mut p = [0.0; HARMONICS];
            for q in 0..HARMONICS {
                a[q] = rng.sample::<f64, _>(StandardNormal) / (q + 1) as f64;
                p[q] = rng.gen_range(0.0..TAU);
            }
            amp.push(a);
            phase.push(p);
        }
        Self { offset, amp, phase }
    }

    /// Motif value at cycle phase `t ∈ [0, 1)`.
    fn eval(&self, t: f64, out: &mut [f64]) {
        for (d, o) in out.iter_mut().enumerate() {
            let mut v = self.offset[d];
            for q in 0..HARMONICS {
                v += self.amp[d][q] * (TAU * (q + 1) as f64 * t + self.phase[d][q]).sin();
            }
            *o = v;
        }
    }
}

fn draw(rng: &mut SplitMix64, [lo, hi]: [usize; 2]) -> usize {
    rng.gen_range(lo..=hi)
}

/// Lengths of cycles and inner gaps plus the leading offset, or `None` when
/// no draw fits in the frame budget.
fn place(cfg: &GenConfig, rng: &mut SplitMix64, count: usize) -> Option<Vec<CycleSpan>> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let cycles: Vec<usize> = (0..count).map(|_| draw(rng, cfg.cycle_len_range)).collect();
        let gaps: Vec<usize> = (1..count.max(1))
            .map(|_| draw(rng, cfg.interval_len_range))
            .collect();
        let used: usize = cycles.iter().sum::<usize>() + gaps.iter().sum::<usize>();
        if used > cfg.len {
            continue;
        }
        let mut cursor = rng.gen_range(0..=cfg.len - used);
        let mut spans = Vec::with_capacity(count);
        for (h, c) in cycles.iter().enumerate() {
            if h > 0 {
                cursor += gaps[h - 1];
            }
            spans.push(CycleSpan::new(cursor, cursor + c - 1));
            cursor += c;
        }
        return Some(spans);
    }
    None
}

/// Sequence number `index` of the dataset defined by `cfg`.
pub fn gen_sequence(cfg: &GenConfig, index: u64) -> Result<FeatureSequence> {
    cfg.validate()?;
    let mut rng = rng::purpose_stream(cfg.seed, "sequence", index);
    let dim = cfg.feature_dim;
    let count = draw(&mut rng, cfg.count_range);
    let cycles = place(cfg, &mut rng, count).ok_or_else(|| {
        Error::Generation(format!(
            "no layout for {count} cycles in {} frames after {PLACEMENT_ATTEMPTS} attempts",
            cfg.len
        ))
    })?;
    let motif = match cfg.motif_classes {
        0 => Motif::sample(&mut rng, dim),
        k => {
            let class = rng.gen_range(0..k as u64);
            Motif::sample(&mut rng::purpose_stream(cfg.seed, "motif", class), dim)
        }
    };
    let mut data = vec![0.0; cfg.len * dim];

    for c in &cycles {
        let bend = cfg.warp_strength * rng.gen_range(-0.9..=0.9);
        let gain = rng.gen_range(0.8..=1.2);
        let n = c.len() as f64;
        for (f, frame) in (c.start..=c.end).enumerate() {
            let u = (f as f64 + 0.5) / n;
            let t = u + bend * (TAU * u).sin() / TAU;
            let row = &mut data[frame * dim..(frame + 1) * dim];
            motif.eval(t, row);
            row.iter_mut().for_each(|v| *v *= gain);
        }
    }

    for iv in intervals_between(&cycles, cfg.len, 1) {
        let n = iv.len();
        if rng.gen_bool(cfg.distractor_prob) {
            let other = Motif::sample(&mut rng, dim);
            for (f, frame) in (iv.start..=iv.end).enumerate() {
                let t = (f as f64 + 0.5) / n as f64;
                other.eval(t, &mut data[frame * dim..(frame + 1) * dim]);
            }
        } else {
            let from: Vec<f64> = (0..dim)
                .map(|_| DRIFT_STD * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let to: Vec<f64> = (0..dim)
                .map(|_| DRIFT_STD * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for (f, frame) in (iv.start..=iv.end).enumerate() {
                let w = if n > 1 { f as f64 / (n - 1) as f64 } else { 0.0 };
                for d in 0..dim {
                    data[frame * dim + d] =
                        REST_LEVEL * motif.offset[d] + (1.0 - w) * from[d] + w * to[d];
                }
            }
        }
    }

    if cfg.noise_std > 0.0 {
        for v in data.iter_mut() {
            *v += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let features = Tensor::matrix(cfg.len, dim, data)?;
    FeatureSequence::new(format!("seq{index:05}"), features, cycles)
}

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// The suite described by `cfg.sequences` and `cfg.split`.
pub fn gen_suite(cfg: &GenConfig) -> Result<[GenDataset; 3]> {
    if cfg.sequences == 0 {
        return Err(Error::Config("sequences must be positive".into()));
    }
    gen_dataset(cfg, cfg.sequences, cfg.split)
}

/// Generates `n` sequences and partitions them by index into train,
/// validation and test splits.
pub fn gen_dataset(
    cfg: &GenConfig,
    n: usize,
    split: SplitFractions,
) -> Result<[GenDataset; 3]> {
    let fr = [split.train, split.val, split.test];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fr:?} must sum to 1")));
    }
    let n_train = (n as f64 * split.train).round() as usize;
    let n_val = ((n as f64 * split.val).round() as usize).min(n - n_train);
    let bounds = [0, n_train, n_train + n_val, n];
    let mut out = Vec::with_capacity(3);
    for w in bounds.windows(2) {
        let sequences = (w[0]..w[1])
            .map(|i| gen_sequence(cfg, i as u64))
            .collect::<Result<Vec<_>>>()?;
        out.push(GenDataset {
            sequences,
            config: cfg.clone(),
        });
    }
    Ok(out.try_into().expect("three splits"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let cfg = GenConfig::default();
        let a = gen_sequence(&cfg, 17).unwrap();
        let b = gen_sequence(&cfg, 17).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.cycles, b.cycles);
        let c = gen_sequence(&cfg, 18).unwrap();
        assert_ne!(a.features.data(), c.features.data());
    }

    #[test]
    fn zero_count_is_one_interval() {
        let cfg = GenConfig {
            count_range: [0, 0],
            ..GenConfig::default()
        };
        let s = gen_sequence(&cfg, 0).unwrap();
        assert_eq!(s.count, 0);
        let ivs = crate::sequence::derive_intervals(&s, 1);
        assert_eq!(ivs.len(), 1);
        assert_eq!((ivs[0].start, ivs[0].end), (0, cfg.len - 1));
    }

    #[test]
    fn split_sizes() {
        let cfg = GenConfig::default();
        let split = SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        };
        let [tr, va, te] = gen_dataset(&cfg, 10, split).unwrap();
        assert_eq!((tr.sequences.len(), va.sequences.len(), te.sequences.len()), (8, 1, 1));
        assert_eq!(va.sequences[0].id, "seq00008");
        let bad = SplitFractions {
            train: 0.5,
            val: 0.1,
            test: 0.1,
        };
        assert!(gen_dataset(&cfg, 10, bad).is_err());
    }

    #[test]
    fn infeasible_configs_rejected() {
        let cfg = GenConfig {
            len: 20,
            count_range: [5, 5],
            cycle_len_range: [5, 5],
            ..GenConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = GenConfig {
            warp_strength: 1.5,
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tight_layouts_fail_after_bounded_attempts() {
        // feasible at the minimum, but the cycle draws almost never fit
        let cfg = GenConfig {
            len: 20,
            count_range: [5, 5],
            cycle_len_range: [4, 40],
            interval_len_range: [0, 0],
            ..GenConfig::default()
        };
        assert!(matches!(gen_sequence(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn mean_count_within_range() {
        let cfg = GenConfig::default();
        let [tr, va, te] = gen_dataset(&cfg, 200, SplitFractions::default()).unwrap();
        let counts: Vec<usize> = tr
            .sequences
            .iter()
            .chain(&va.sequences)
            .chain(&te.sequences)
            .map(|s| s.count)
            .collect();
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        assert!(mean >= cfg.count_range[0] as f64 && mean <= cfg.count_range[1] as f64);
        // uniform on [1, 6] has mean 3.5; 200 draws put it well inside ±0.5
        assert!((mean - 3.5).abs() < 0.5, "mean count {mean}");
    }
}
