//! Acceptance run: one pass/fail line per criterion, nonzero exit if any fails.
//!
//! The ablation-direction criterion trains 20 models on the default synthetic
//! suite and dominates the runtime (about ten minutes on one core).

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

use repcount_core::gradsuite;
use repcount_core::model::count_readout;
use repcount_core::priors::{contrastive_loss, pull_loss, push_loss, reference_embeddings, triplet_loss, ReferenceEmbeddings};
use repcount_core::rca::{rca_apply, RcaConfig};
use repcount_core::rng;
use repcount_core::sequence::{derive_intervals, gaussianize, CycleSpan, FeatureSequence};
use repcount_core::store;
use repcount_core::synth::{gen_sequence, gen_suite, GenConfig};
use repcount_core::train::{
    ablate, evaluate, mae, median, obo, train, AblationCell, AblationSuite, EvalReport, TrainConfig,
};
use repcount_core::{Tape, Tensor};

const GEN_CONFIG: &str = include_str!("../../../configs/gen.json");
const DESK_CONFIG: &str = include_str!("../../../configs/desk.json");

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|_| Outcome::new(false, "panicked"));
    println!(
        "criterion {id} [{}] {name}: {} ({:.1}s)",
        if out.passed { "PASS" } else { "FAIL" },
        out.detail,
        t.elapsed().as_secs_f64()
    );
    out.passed
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let checks = gradsuite::run_suite(10).expect("suite runs");
    let elapsed = t.elapsed();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passes()).map(|c| c.name.as_str()).collect();
    let worst_op = checks
        .iter()
        .filter(|c| c.name != "model_end_to_end")
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max);
    let model = checks.last().expect("model check").max_rel_error;
    Outcome::new(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks x 10 seeds, worst op/loss rel err {worst_op:.2e}, model {model:.2e}, failed {failed:?}, {:.1}s",
            checks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn refs(tape: &mut Tape, cycles: &[&[f64]], intervals: &[&[f64]]) -> ReferenceEmbeddings {
    let c: Vec<Tensor> = cycles.iter().map(|v| Tensor::vector(v.to_vec())).collect();
    let i: Vec<Tensor> = intervals.iter().map(|v| Tensor::vector(v.to_vec())).collect();
    ReferenceEmbeddings::from_vectors(tape, &c, &i).expect("valid embeddings")
}

fn brute_round(x: f64) -> i64 {
    let f = x.floor();
    let frac = x - f;
    let f = f as i64;
    match frac.partial_cmp(&0.5).expect("finite") {
        std::cmp::Ordering::Less => f,
        std::cmp::Ordering::Greater => f + 1,
        std::cmp::Ordering::Equal => f + (f & 1),
    }
}

fn loss_oracles() -> Outcome {
    let mut tape = Tape::new();
    let mut ok = Vec::new();

    let r = refs(&mut tape, &[&[0.5, -1.0, 2.0], &[0.5, -1.0, 2.0]], &[]);
    let v = pull_loss(&mut tape, &r).expect("pull");
    ok.push(("pull", tape.scalar(v).abs() < 1e-9));

    let base: &[f64] = &[1.0, 2.0];
    let cases: [(&[f64], f64); 3] = [(&[2.0, 4.0], 1.0), (&[-2.0, 1.0], (-1.0f64).exp()), (&[-1.0, -2.0], (-2.0f64).exp())];
    let push_ok = cases.iter().all(|(interval, expected)| {
        let r = refs(&mut tape, &[base], &[interval]);
        let v = push_loss(&mut tape, &r).expect("push");
        (tape.scalar(v) - expected).abs() < 1e-9
    });
    ok.push(("push", push_ok));

    let r = refs(&mut tape, &[&[0.3, 0.4]], &[]);
    let v = contrastive_loss(&mut tape, &r, 0.07).expect("contrastive");
    ok.push(("contrastive", tape.scalar(v).abs() < 1e-9));

    let r = refs(&mut tape, &[&[1.0, 0.0], &[1.0, 0.0]], &[&[0.0, 1.0]]);
    let v = triplet_loss(&mut tape, &r, 2.0).expect("triplet");
    ok.push(("triplet", (tape.scalar(v) - 1.0).abs() < 1e-9));

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(13);
    let mut metric_ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..25);
        let gts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..40)).collect();
        let preds: Vec<f64> = gts
            .iter()
            .map(|&g| match rng.gen_range(0..3) {
                0 => rng.gen_range(0..40) as f64 + 0.5,
                _ => g as f64 + rng.gen_range(-5.0..5.0),
            })
            .collect();
        let (mut sum, mut hits) = (0.0, 0usize);
        for (&p, &g) in preds.iter().zip(&gts) {
            let d = (brute_round(p) - g as i64).abs();
            sum += d as f64 / g as f64;
            hits += usize::from(d <= 1);
        }
        metric_ok &= mae(&preds, &gts).expect("mae") == sum / n as f64;
        metric_ok &= obo(&preds, &gts).expect("obo") == hits as f64 / n as f64;
    }
    ok.push(("mae/obo x1000", metric_ok));

    let failed: Vec<&str> = ok.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    Outcome::new(failed.is_empty(), format!("failed {failed:?}"))
}

fn density_conservation() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(16..256);
        let mut cycles = Vec::new();
        let mut cursor = rng.gen_range(0..5);
        while cursor + 1 < len {
            let end = (cursor + rng.gen_range(1..16)).min(len - 1);
            cycles.push(CycleSpan::new(cursor, end));
            cursor = end + 1 + rng.gen_range(0..8);
        }
        let seq = FeatureSequence::new("d", Tensor::zeros(&[len, 1]), cycles).expect("valid spans");
        let g = gaussianize(&seq, len).expect("density");
        worst = worst.max((g.total() - seq.count as f64).abs());
        worst = worst.max((count_readout(&g) - seq.count as f64).abs());
    }
    Outcome::new(worst < 1e-6, format!("100 annotation sets, max |sum - count| {worst:.1e}"))
}

fn rca_statistics() -> Outcome {
    let count = 25;
    let cycles = (0..count).map(|h| CycleSpan::new(3 * h, 3 * h + 1)).collect();
    let seq = FeatureSequence::new("rca", Tensor::zeros(&[3 * count, 2]), cycles).expect("valid");
    let cfg = RcaConfig {
        tau: 15.0,
        prob: 0.5,
        seed: 0,
    };
    let mut modified = 0usize;
    let mut in_range = true;
    let mut never_grows = true;
    for i in 0..10_000u64 {
        let out = rca_apply(&seq, &cfg, &mut rng::stream(cfg.seed, i)).expect("rca");
        never_grows &= out.sequence.count <= seq.count;
        if out.resampled {
            modified += 1;
            in_range &= (1..=15).contains(&out.sequence.count);
        }
    }
    let frac = modified as f64 / 10_000.0;
    Outcome::new(
        (0.48..=0.52).contains(&frac) && in_range && never_grows,
        format!("modified fraction {frac:.4}, counts in [1, 15]: {in_range}, never increases: {never_grows}"),
    )
}

struct Run {
    mae: f64,
    loss_epoch1: f64,
    loss_epoch20: Option<f64>,
}

fn ablation_direction() -> Outcome {
    let t = Instant::now();
    let gen: GenConfig = store::parse_config(GEN_CONFIG).expect("gen config");
    let base: TrainConfig = store::parse_config(DESK_CONFIG).expect("train config");
    let [tr, va, te] = gen_suite(&gen).expect("suite");
    let cells = AblationSuite::Losses.cells(&base);
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| (0..5).map(move |s| (c, s))).collect();
    let runs: Vec<Run> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let cfg = TrainConfig {
                seed: s,
                ..cells[c].1.clone()
            };
            let out = train(&tr.sequences, &va.sequences, &cfg).expect("training");
            let report = evaluate("test", &te.sequences, &out.params, &out.model).expect("evaluation");
            Run {
                mae: report.mae,
                loss_epoch1: out.log[0].train_loss,
                loss_epoch20: out.log.get(19).map(|e| e.train_loss),
            }
        })
        .collect();
    let elapsed = t.elapsed();

    let cell_runs = |c: usize| &runs[c * 5..(c + 1) * 5];
    let medians: Vec<(String, f64)> = cells
        .iter()
        .enumerate()
        .map(|(c, (label, _))| (label.clone(), median(&cell_runs(c).iter().map(|r| r.mae).collect::<Vec<_>>())))
        .collect();
    let none = medians[0].1;
    let full = medians[3].1;
    let full_runs = cell_runs(3);
    let first = median(&full_runs.iter().map(|r| r.loss_epoch1).collect::<Vec<_>>());
    let twentieth = median(&full_runs.iter().map(|r| r.loss_epoch20.unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let table: Vec<String> = medians.iter().map(|(l, m)| format!("{l}={m:.4}")).collect();
    Outcome::new(
        full < none && elapsed < Duration::from_secs(15 * 60),
        format!(
            "median test MAE {}; train loss epoch 1 {first:.5} -> epoch 20 {twentieth:.5} ({}); {:.0}s",
            table.join(" "),
            if twentieth < first { "decreasing" } else { "NOT decreasing" },
            elapsed.as_secs_f64()
        ),
    )
}

fn harness_structure() -> Outcome {
    let gen = GenConfig {
        len: 32,
        feature_dim: 4,
        count_range: [1, 3],
        cycle_len_range: [3, 6],
        interval_len_range: [1, 3],
        sequences: 12,
        ..GenConfig::default()
    };
    let [tr, va, te] = gen_suite(&gen).expect("suite");
    let base = TrainConfig {
        epochs: 1,
        batch_size: 4,
        learning_rate: 1e-3,
        len: 32,
        d_model: 8,
        fusion_channels: 2,
        head_hidden: 8,
        ffn_hidden: 8,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let mut rows = Vec::new();
    let mut recomputable = true;
    for suite in AblationSuite::ALL {
        let cells: Vec<AblationCell> =
            ablate(suite, &base, 5, &tr.sequences, &va.sequences, &te.sequences).expect("ablation");
        rows.push(format!("{}={}", suite.name(), cells.len()));
        for cell in &cells {
            let mut maes = Vec::new();
            let mut obos = Vec::new();
            for (seed, report) in cell.seeds.iter().zip(&cell.reports) {
                let path = dir.path().join(format!("{}_{}_{seed}.jsonl", cell.suite, cell.config));
                store::write_text(&path, &report.to_jsonl().expect("jsonl")).expect("write");
                let stored = EvalReport::from_jsonl(&std::fs::read_to_string(&path).expect("read")).expect("parse");
                let (m, o) = stored.recompute().expect("recompute");
                maes.push(m);
                obos.push(o);
            }
            recomputable &= median(&maes) == cell.median_mae && median(&obos) == cell.median_obo;
        }
    }
    let expected = ["phases=3", "losses=4", "variants=3", "rca=2", "sampling_rate=2"];
    Outcome::new(
        rows == expected && recomputable,
        format!("rows {}; recomputable from stored reports: {recomputable}", rows.join(" ")),
    )
}

fn determinism() -> Outcome {
    let gen = GenConfig {
        len: 32,
        feature_dim: 4,
        count_range: [1, 3],
        cycle_len_range: [3, 6],
        interval_len_range: [1, 3],
        sequences: 8,
        ..GenConfig::default()
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let write_suite = |name: &str| {
        let [tr, va, te] = gen_suite(&gen).expect("suite");
        let root = dir.path().join(name);
        store::write_splits(&root, [&tr.sequences, &va.sequences, &te.sequences]).expect("write");
        let mut bytes = Vec::new();
        for split in store::SPLITS {
            let mut entries: Vec<_> = std::fs::read_dir(root.join(split))
                .expect("split dir")
                .map(|e| e.expect("entry").path())
                .collect();
            entries.sort();
            for p in entries {
                bytes.extend(std::fs::read(p).expect("read"));
            }
        }
        bytes
    };
    let data_same = write_suite("a") == write_suite("b");
    let index_same = (0..8).all(|i| gen_sequence(&gen, i).expect("gen") == gen_sequence(&gen, i).expect("gen"));

    let [tr, va, _] = gen_suite(&gen).expect("suite");
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        learning_rate: 1e-3,
        len: 16,
        d_model: 8,
        fusion_channels: 2,
        head_hidden: 8,
        ffn_hidden: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = train(&tr.sequences, &va.sequences, &cfg).expect("train");
    let b = train(&tr.sequences, &va.sequences, &cfg).expect("train");
    let ckpt_a = store::encode_checkpoint(&a.model, &a.params).expect("encode");
    let ckpt_b = store::encode_checkpoint(&b.model, &b.params).expect("encode");
    let logs_same = serde_json::to_vec(&a.log).expect("json") == serde_json::to_vec(&b.log).expect("json");
    let train_same = ckpt_a == ckpt_b && logs_same;

    let path = dir.path().join("ckpt.bin");
    let again = dir.path().join("ckpt2.bin");
    store::save_checkpoint(&path, &a.model, &a.params).expect("save");
    let (m, p) = store::load_checkpoint(&path).expect("load");
    store::save_checkpoint(&again, &m, &p).expect("save");
    let round_trip = std::fs::read(&path).expect("read") == std::fs::read(&again).expect("read");

    Outcome::new(
        data_same && index_same && train_same && round_trip,
        format!("dataset bytes {data_same}, per-index {index_same}, training {train_same}, checkpoint round trip {round_trip}"),
    )
}

fn mean_similarity(cfg: &GenConfig, n: u64) -> (f64, f64, f64) {
    let cos = |a: &Tensor, b: &Tensor| {
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let (mut cyc, mut nc, mut int, mut ni) = (0.0, 0usize, 0.0, 0usize);
    let mut worst_pair = 0.0f64;
    for index in 0..n {
        let seq = gen_sequence(cfg, index).expect("gen");
        let mut tape = Tape::new();
        let e = tape.constant(seq.features.clone());
        let refs = reference_embeddings(&mut tape, e, &seq.cycles, &derive_intervals(&seq, 1), 1).expect("refs");
        let Some(r) = refs.collective else { continue };
        let r = tape.value(r).clone();
        let cycles: Vec<Tensor> = refs.per_cycle.iter().map(|v| tape.value(*v).clone()).collect();
        for a in &cycles {
            cyc += cos(a, &r);
            nc += 1;
            for b in &cycles {
                worst_pair = worst_pair.max((cos(a, b) - 1.0).abs());
            }
        }
        for v in &refs.per_interval {
            int += cos(tape.value(*v), &r);
            ni += 1;
        }
    }
    (cyc / nc as f64, int / ni.max(1) as f64, worst_pair)
}

fn separability() -> Outcome {
    let noiseless = GenConfig {
        noise_std: 0.0,
        warp_strength: 0.0,
        cycle_len_range: [6, 6],
        ..GenConfig::default()
    };
    let (_, _, worst) = mean_similarity(&noiseless, 100);
    let (cycle_sim, distractor_sim, _) = mean_similarity(
        &GenConfig {
            distractor_prob: 1.0,
            ..GenConfig::default()
        },
        200,
    );
    let (_, rest_sim, _) = mean_similarity(
        &GenConfig {
            distractor_prob: 0.0,
            ..GenConfig::default()
        },
        200,
    );
    Outcome::new(
        worst < 1e-9 && distractor_sim < rest_sim && distractor_sim < cycle_sim,
        format!(
            "noiseless max |cos - 1| {worst:.1e}; mean cycle-interval cos {distractor_sim:.3} with distractors, \
             {rest_sim:.3} without; cycle-collective {cycle_sim:.3}"
        ),
    )
}

fn main() {
    let t = Instant::now();
    let results = [
        run(1, "gradient oracle", gradient_oracle),
        run(2, "loss-value oracles", loss_oracles),
        run(3, "density-map conservation", density_conservation),
        run(4, "RCA statistics", rca_statistics),
        run(5, "ablation direction (pull/push vs regression only)", ablation_direction),
        run(6, "ablation harness structure", harness_structure),
        run(7, "determinism and persistence", determinism),
        run(8, "separability premise", separability),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        results.len(),
        t.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
