//! Annotated feature sequences, interval derivation, ground-truth density
//! maps and fixed-budget resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inclusive frame span of one repetition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct CycleSpan {
    pub start: usize,
    pub end: usize,
}

/// Inclusive frame span containing no repetition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct IntervalSpan {
    pub start: usize,
    pub end: usize,
}

macro_rules! span_impls {
    ($t:ty) => {
        impl $t {
            pub fn new(start: usize, end: usize) -> Self {
                Self { start, end }
            }

            pub fn len(&self) -> usize {
                self.end - self.start + 1
            }

            pub fn is_empty(&self) -> bool {
                false
            }
        }

        impl From<[usize; 2]> for $t {
            fn from([start, end]: [usize; 2]) -> Self {
                Self { start, end }
            }
        }

        impl From<$t> for [usize; 2] {
            fn from(s: $t) -> Self {
                [s.start, s.end]
            }
        }
    };
}

span_impls!(CycleSpan);
span_impls!(IntervalSpan);

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    /// `frames × feature_dim`.
    pub features: Tensor,
    pub cycles: Vec<CycleSpan>,
    pub count: usize,
}

impl FeatureSequence {
    /// Builds a sequence whose count is the number of annotated cycles.
    pub fn new(id: impl Into<String>, features: Tensor, cycles: Vec<CycleSpan>) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            features,
            count: cycles.len(),
            cycles,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid(format!("sequence {}: {msg}", self.id)));
        if self.features.ndim() != 2 {
            return fail(format!("features must be 2-D, got {:?}", self.features.shape()));
        }
        if self.count != self.cycles.len() {
            return fail(format!(
                "count {} but {} cycle spans",
                self.count,
                self.cycles.len()
            ));
        }
        let len = self.len();
        let mut prev_end: Option<usize> = None;
        for c in &self.cycles {
            if c.start > c.end || c.end >= len {
                return fail(format!("span [{}, {}] outside {len} frames", c.start, c.end));
            }
            if prev_end.is_some_and(|p| c.start <= p) {
                return fail(format!("span [{}, {}] overlaps or is unsorted", c.start, c.end));
            }
            prev_end = Some(c.end);
        }
        if !self.features.is_finite() {
            return fail("non-finite feature value".into());
        }
        Ok(())
    }
}

/// Maximal runs of frames not covered by any cycle, including leading and
/// trailing runs. Runs shorter than `min_len` are dropped.
pub fn derive_intervals(seq: &FeatureSequence, min_len: usize) -> Vec<IntervalSpan> {
    intervals_between(&seq.cycles, seq.len(), min_len)
}

pub(crate) fn intervals_between(cycles: &[CycleSpan], len: usize, min_len: usize) -> Vec<IntervalSpan> {
    let mut out = Vec::new();
    let mut cursor = 0;
    let mut push = |start: usize, end_excl: usize| {
        if end_excl > start && end_excl - start >= min_len.max(1) {
            out.push(IntervalSpan::new(start, end_excl - 1));
        }
    };
    for c in cycles {
        push(cursor, c.start);
        cursor = c.end + 1;
    }
    push(cursor, len);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    Predicted,
    GroundTruth,
}

/// Per-frame action density; its sum is the count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub values: Tensor,
    pub kind: DensityKind,
}

impl DensityMap {
    pub fn predicted(values: Tensor) -> Self {
        Self {
            values,
            kind: DensityKind::Predicted,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

/// Ground-truth density on `len` frames: one discrete Gaussian per cycle,
/// centered on the cycle midpoint with σ = cycle length / 6, truncated to
/// the frame grid and renormalized to unit mass.
pub fn gaussianize(seq: &FeatureSequence, len: usize) -> Result<DensityMap> {
    gaussianize_spans(&seq.cycles, len)
}

pub fn gaussianize_spans(cycles: &[CycleSpan], len: usize) -> Result<DensityMap> {
    if len == 0 {
        return Err(Error::Empty("density map of zero frames".into()));
    }
    let mut values = vec![0.0; len];
    let mut bump = vec![0.0; len];
    for c in cycles {
        if c.start > c.end || c.end >= len {
            return Err(Error::Invalid(format!(
                "cycle [{}, {}] outside {len} frames",
                c.start, c.end
            )));
        }
        let mu = (c.start + c.end) as f64 / 2.0;
        let sigma = c.len().max(1) as f64 / 6.0;
        let denom = 2.0 * sigma * sigma;
        for (i, b) in bump.iter_mut().enumerate() {
            let d = i as f64 - mu;
            *b = (-d * d / denom).exp();
        }
        let mass: f64 = bump.iter().sum();
        for (v, b) in values.iter_mut().zip(&bump) {
            *v += b / mass;
        }
    }
    Ok(DensityMap {
        values: Tensor::vector(values),
        kind: DensityKind::GroundTruth,
    })
}

/// Uniform frame resampling to `target` frames: output frame `i` copies raw
/// frame `floor(i * raw / target)` and annotated frame `r` maps to
/// `floor(r * target / raw)`. Cycles squeezed onto frames already taken by
/// their predecessor are shifted forward so spans stay disjoint.
pub fn resample(seq: &FeatureSequence, target: usize) -> Result<FeatureSequence> {
    let raw = seq.len();
    if raw == 0 {
        return Err(Error::Empty(format!("sequence {} has no frames", seq.id)));
    }
    if target == 0 {
        return Err(Error::Config("target length must be at least 1".into()));
    }
    if raw == target {
        return Ok(seq.clone());
    }
    let d = seq.feature_dim();
    let mut data = Vec::with_capacity(target * d);
    for i in 0..target {
        let src = i * raw / target;
        data.extend_from_slice(seq.features.row(src));
    }
    let features = Tensor::matrix(target, d, data)?;
    let cycles = remap_spans(&seq.cycles, raw, target).map_err(|_| {
        Error::Invalid(format!(
            "sequence {}: {} cycles do not fit in {target} frames",
            seq.id, seq.count
        ))
    })?;
    Ok(FeatureSequence {
        id: seq.id.clone(),
        features,
        count: cycles.len(),
        cycles,
    })
}

fn remap_spans(cycles: &[CycleSpan], raw: usize, target: usize) -> Result<Vec<CycleSpan>, ()> {
    let map = |r: usize| r * target / raw;
    let mut out: Vec<CycleSpan> = Vec::with_capacity(cycles.len());
    for c in cycles {
        let mut start = map(c.start);
        let mut end = map(c.end);
        if let Some(prev) = out.last() {
            if start <= prev.end {
                start = prev.end + 1;
                end = end.max(start);
            }
        }
        if end >= target {
            return Err(());
        }
        out.push(CycleSpan::new(start, end));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(len: usize, cycles: &[[usize; 2]]) -> FeatureSequence {
        let features = Tensor::new(
            vec![len, 2],
            (0..len * 2).map(|v| v as f64).collect(),
        )
        .unwrap();
        FeatureSequence::new("s", features, cycles.iter().map(|&c| c.into()).collect()).unwrap()
    }

    fn spans(v: &[IntervalSpan]) -> Vec<[usize; 2]> {
        v.iter().map(|&s| s.into()).collect()
    }

    #[test]
    fn interval_complements() {
        let s = seq(10, &[[2, 4], [7, 8]]);
        assert_eq!(spans(&derive_intervals(&s, 1)), vec![[0, 1], [5, 6], [9, 9]]);
        assert!(derive_intervals(&seq(10, &[[0, 9]]), 1).is_empty());
        assert_eq!(spans(&derive_intervals(&seq(10, &[]), 1)), vec![[0, 9]]);
        assert_eq!(spans(&derive_intervals(&s, 2)), vec![[0, 1], [5, 6]]);
    }

    #[test]
    fn validation_rejects_bad_spans() {
        let f = Tensor::zeros(&[5, 1]);
        assert!(FeatureSequence::new("a", f.clone(), vec![[3, 5].into()]).is_err());
        assert!(FeatureSequence::new("a", f.clone(), vec![[2, 3].into(), [3, 4].into()]).is_err());
        assert!(FeatureSequence::new("a", f.clone(), vec![[3, 4].into(), [0, 1].into()]).is_err());
        let mut s = FeatureSequence::new("a", f, vec![[0, 1].into()]).unwrap();
        s.count = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn gaussian_empty_and_single() {
        let g = gaussianize(&seq(64, &[]), 64).unwrap();
        assert_eq!(g.total(), 0.0);
        assert_eq!(g.kind, DensityKind::GroundTruth);

        let g = gaussianize(&seq(64, &[[10, 20]]), 64).unwrap();
        let v = g.values.data();
        let argmax = (0..64).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax, 15);
        assert!((g.total() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_superposition() {
        let both = gaussianize(&seq(64, &[[10, 17], [30, 37]]), 64).unwrap();
        let a = gaussianize(&seq(64, &[[10, 17]]), 64).unwrap();
        let b = gaussianize(&seq(64, &[[30, 37]]), 64).unwrap();
        for i in 0..64 {
            let direct = a.values.data()[i] + b.values.data()[i];
            assert!((both.values.data()[i] - direct).abs() < 1e-15);
        }
        // identical bumps are translates of each other away from the borders
        for i in 0..20 {
            assert!((a.values.data()[i] - b.values.data()[i + 20]).abs() < 1e-12);
        }
        assert!((both.total() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn resample_cases() {
        let s = seq(20, &[[3, 9]]);
        assert_eq!(resample(&s, 20).unwrap(), s);

        let s = seq(128, &[[0, 127]]);
        let r = resample(&s, 64).unwrap();
        assert_eq!(r.cycles, vec![CycleSpan::new(0, 63)]);
        assert_eq!(r.features.row(1), s.features.row(2));

        let s = seq(100, &[[50, 59]]);
        assert_eq!(resample(&s, 64).unwrap().cycles, vec![CycleSpan::new(32, 37)]);

        assert!(matches!(resample(&s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn resample_keeps_collapsed_cycles_disjoint() {
        let s = seq(128, &[[0, 0], [1, 1], [2, 2]]);
        let r = resample(&s, 64).unwrap();
        assert_eq!(
            r.cycles,
            vec![CycleSpan::new(0, 0), CycleSpan::new(1, 1), CycleSpan::new(2, 2)]
        );
        assert_eq!(r.count, 3);
        let s = seq(10, &[[0, 0], [1, 1], [2, 2], [3, 3]]);
        assert!(resample(&s, 3).is_err());
    }

    fn annotation() -> impl Strategy<Value = (usize, Vec<[usize; 2]>)> {
        (8usize..96).prop_flat_map(|len| {
            proptest::collection::vec((0usize..len, 1usize..12), 0..10).prop_map(move |raw| {
                let mut cuts: Vec<(usize, usize)> = raw;
                cuts.sort();
                let mut spans = Vec::new();
                let mut next_free = 0;
                for (start, w) in cuts {
                    let start = start.max(next_free);
                    let end = start + w - 1;
                    if end < len {
                        spans.push([start, end]);
                        next_free = end + 1;
                    }
                }
                (len, spans)
            })
        })
    }

    proptest! {
        #[test]
        fn intervals_partition_the_frames((len, cycles) in annotation()) {
            let s = seq(len, &cycles);
            let ivs = derive_intervals(&s, 1);
            let mut covered = vec![0u8; len];
            for c in &s.cycles {
                (c.start..=c.end).for_each(|i| covered[i] += 1);
            }
            for iv in &ivs {
                (iv.start..=iv.end).for_each(|i| covered[i] += 1);
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
        }

        #[test]
        fn gaussian_mass_equals_count((len, cycles) in annotation()) {
            let s = seq(len, &cycles);
            let g = gaussianize(&s, len).unwrap();
            prop_assert!((g.total() - s.count as f64).abs() < 1e-6);
        }

        #[test]
        fn resample_idempotent_and_count_preserving((len, cycles) in annotation(), target in 16usize..80) {
            let s = seq(len, &cycles);
            if let Ok(r) = resample(&s, target) {
                prop_assert_eq!(r.count, s.count);
                r.validate().unwrap();
                prop_assert_eq!(resample(&r, target).unwrap(), r);
            }
        }
    }
}
