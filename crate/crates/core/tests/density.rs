use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use repcount_core::model::count_readout;
use repcount_core::sequence::{derive_intervals, gaussianize, resample, CycleSpan, FeatureSequence};
use repcount_core::synth::{gen_sequence, GenConfig};
use repcount_core::Tensor;

/// Random sorted, disjoint spans inside `len` frames.
fn random_spans(rng: &mut impl Rng, len: usize) -> Vec<CycleSpan> {
    let mut spans = Vec::new();
    let mut cursor = rng.gen_range(0..4);
    while cursor < len {
        let width = rng.gen_range(1..12);
        let end = (cursor + width - 1).min(len - 1);
        spans.push(CycleSpan::new(cursor, end));
        cursor = end + 1 + rng.gen_range(0..6);
    }
    spans
}

#[test]
fn density_mass_equals_count_on_random_annotations() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(99);
    for _ in 0..100 {
        let len = rng.gen_range(8..200);
        let cycles = random_spans(&mut rng, len);
        let seq = FeatureSequence::new("r", Tensor::zeros(&[len, 2]), cycles).unwrap();
        let g = gaussianize(&seq, len).unwrap();
        assert!((g.total() - seq.count as f64).abs() < 1e-6);
        assert!((count_readout(&g) - seq.count as f64).abs() < 1e-6);
        assert!(g.values.data().iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn resampled_generator_output_conserves_count() {
    let cfg = GenConfig {
        len: 150,
        ..GenConfig::default()
    };
    for index in 0..40 {
        let seq = gen_sequence(&cfg, index).unwrap();
        for target in [64, 128] {
            let r = resample(&seq, target).unwrap();
            r.validate().unwrap();
            assert_eq!(r.count, seq.count);
            let g = gaussianize(&r, target).unwrap();
            assert!((g.total() - seq.count as f64).abs() < 1e-6);
        }
    }
}

fn sequence_strategy() -> impl Strategy<Value = FeatureSequence> {
    (4usize..120, any::<u64>()).prop_map(|(len, seed)| {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let cycles = random_spans(&mut rng, len);
        let data = (0..len * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureSequence::new("p", Tensor::matrix(len, 3, data).unwrap(), cycles).unwrap()
    })
}

proptest! {
    #[test]
    fn intervals_partition_the_complement(seq in sequence_strategy()) {
        let intervals = derive_intervals(&seq, 1);
        let mut covered = vec![0u8; seq.len()];
        for c in &seq.cycles {
            for f in c.start..=c.end {
                covered[f] += 1;
            }
        }
        for iv in &intervals {
            for f in iv.start..=iv.end {
                covered[f] += 1;
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn resample_is_idempotent(seq in sequence_strategy(), target in 1usize..100) {
        prop_assume!(target >= 2 * seq.count.max(1));
        if let Ok(once) = resample(&seq, target) {
            once.validate().unwrap();
            prop_assert_eq!(once.count, seq.count);
            prop_assert_eq!(resample(&once, target).unwrap(), once);
        }
    }
}
