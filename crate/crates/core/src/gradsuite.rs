//! The full finite-difference sweep: every tape op, every loss, both
//! embedding variants and the end-to-end model on a reduced configuration.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::grad_check_many;
use crate::model::{forward, ModelConfig, ModelParams};
use crate::priors::{
    combined_loss, contrastive_loss, phase_pull_loss, pull_loss, push_loss, reference_embeddings,
    regression_loss, triplet_loss, LossWeights,
};
use crate::rng::{self, SplitMix64};
use crate::sequence::{gaussianize_spans, intervals_between, CycleSpan};
use crate::tensor::Tensor;

/// Finite-difference step used throughout the suite.
pub const EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Worst result of one check over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCheck {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub seeds: u64,
    pub coordinates: usize,
}

impl SuiteCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Body = fn(&mut Tape, &[Var], &[Tensor]) -> Result<Var>;

/// A check: how to draw inputs from a seed, and the scalar function of them.
/// The second element of the draw is extra constant data, such as a
/// projection vector.
struct Case {
    name: &'static str,
    draw: fn(&mut SplitMix64) -> (Vec<Tensor>, Vec<Tensor>),
    body: Body,
}

fn uniform(r: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).expect("shape")
}

/// Uniform in `[-2, -0.1] ∪ [0.1, 2]`, keeping kinks out of the difference stencil.
fn off_kink(r: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let mut t = uniform(r, shape);
    for v in t.data_mut() {
        if v.abs() < 0.1 {
            *v = if *v < 0.0 { -0.1 - v.abs() } else { 0.1 + v.abs() };
        }
    }
    t
}

/// Inner product with a fixed random projection so every output coordinate
/// receives a distinct upstream gradient.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(w.clone().reshaped(shape)?);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn proj_for(r: &mut SplitMix64, n: usize) -> Vec<Tensor> {
    vec![Tensor::vector((0..n).map(|_| r.sample(StandardNormal)).collect())]
}

macro_rules! unary {
    ($name:literal, $shape:expr, $gen:ident, |$t:ident, $x:ident| $e:expr) => {
        Case {
            name: $name,
            draw: |r| (vec![$gen(r, &$shape)], Vec::new()),
            body: |$t, v, _| {
                let $x = v[0];
                $e
            },
        }
    };
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            draw: |r| (vec![uniform(r, &[3, 4]), uniform(r, &[4, 2])], proj_for(r, 6)),
            body: |t, v, c| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "matmul_sorted",
            draw: |r| (vec![uniform(r, &[3, 5]), uniform(r, &[5, 2])], proj_for(r, 6)),
            body: |t, v, c| {
                let y = t.matmul_sorted(v[0], v[1])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "transpose",
            draw: |r| (vec![uniform(r, &[3, 4])], proj_for(r, 12)),
            body: |t, v, c| {
                let y = t.transpose(v[0])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "add",
            draw: |r| (vec![uniform(r, &[2, 3]), uniform(r, &[2, 3])], proj_for(r, 6)),
            body: |t, v, c| {
                let y = t.add(v[0], v[1])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "sub",
            draw: |r| (vec![uniform(r, &[2, 3]), uniform(r, &[2, 3])], proj_for(r, 6)),
            body: |t, v, c| {
                let y = t.sub(v[0], v[1])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "mul",
            draw: |r| (vec![uniform(r, &[2, 3]), uniform(r, &[2, 3])], proj_for(r, 6)),
            body: |t, v, c| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "add_bias",
            draw: |r| (vec![uniform(r, &[3, 4]), uniform(r, &[4])], proj_for(r, 12)),
            body: |t, v, c| {
                let y = t.add_bias(v[0], v[1])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "scale",
            draw: |r| (vec![uniform(r, &[5])], proj_for(r, 5)),
            body: |t, v, c| {
                let y = t.scale(v[0], -1.7);
                project(t, y, &c[0])
            },
        },
        Case {
            name: "neg",
            draw: |r| (vec![uniform(r, &[5])], proj_for(r, 5)),
            body: |t, v, c| {
                let y = t.neg(v[0]);
                project(t, y, &c[0])
            },
        },
        Case {
            name: "exp",
            draw: |r| (vec![uniform(r, &[2, 3])], proj_for(r, 6)),
            body: |t, v, c| {
                let y = t.exp(v[0]);
                project(t, y, &c[0])
            },
        },
        Case {
            name: "tanh",
            draw: |r| (vec![uniform(r, &[2, 3])], proj_for(r, 6)),
            body: |t, v, c| {
                let y = t.tanh(v[0]);
                project(t, y, &c[0])
            },
        },
        Case {
            name: "relu",
            draw: |r| (vec![off_kink(r, &[2, 4])], proj_for(r, 8)),
            body: |t, v, c| {
                let y = t.relu(v[0]);
                project(t, y, &c[0])
            },
        },
        unary!("sum", [3, 3], uniform, |t, x| {
            let y = t.sum(x);
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
        unary!("mean", [3, 3], uniform, |t, x| {
            let y = t.mean(x);
            let y2 = t.exp(y);
            Ok(t.sum(y2))
        }),
        Case {
            name: "softmax_rows",
            draw: |r| (vec![uniform(r, &[4, 4])], proj_for(r, 16)),
            body: |t, v, c| {
                let y = t.softmax_rows(v[0])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "layer_norm",
            draw: |r| (vec![uniform(r, &[3, 5]), uniform(r, &[5]), uniform(r, &[5])], proj_for(r, 15)),
            body: |t, v, c| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "conv1d",
            draw: |r| {
                (
                    vec![uniform(r, &[6, 3]), uniform(r, &[3, 3, 2]), uniform(r, &[2])],
                    proj_for(r, 12),
                )
            },
            body: |t, v, c| {
                let y = t.conv1d(v[0], v[1], v[2])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "conv2d",
            draw: |r| {
                (
                    vec![uniform(r, &[2, 4, 5]), uniform(r, &[3, 2, 3, 3]), uniform(r, &[3])],
                    proj_for(r, 60),
                )
            },
            body: |t, v, c| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "sliding_mean",
            draw: |r| (vec![uniform(r, &[9, 2])], proj_for(r, 18)),
            body: |t, v, c| {
                let a = t.sliding_mean(v[0], 4)?;
                let b = t.sliding_mean(v[0], 3)?;
                let y = t.mul(a, b)?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "mean_rows",
            draw: |r| (vec![uniform(r, &[6, 3])], proj_for(r, 3)),
            body: |t, v, c| {
                let y = t.mean_rows(v[0], 1, 4)?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "stack",
            draw: |r| (vec![uniform(r, &[2, 3]), uniform(r, &[2, 3])], proj_for(r, 12)),
            body: |t, v, c| {
                let y = t.stack(&[v[0], v[1]])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "slice_cols",
            draw: |r| (vec![uniform(r, &[3, 5])], proj_for(r, 6)),
            body: |t, v, c| {
                let y = t.slice_cols(v[0], 1, 3)?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "concat_cols",
            draw: |r| (vec![uniform(r, &[3, 2]), uniform(r, &[3, 4])], proj_for(r, 24)),
            body: |t, v, c| {
                let y = t.concat_cols(&[v[0], v[1], v[0]])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "permute3",
            draw: |r| (vec![uniform(r, &[2, 3, 4])], proj_for(r, 24)),
            body: |t, v, c| {
                let y = t.permute3(v[0], [2, 0, 1])?;
                project(t, y, &c[0])
            },
        },
        Case {
            name: "reshape",
            draw: |r| (vec![uniform(r, &[2, 6])], proj_for(r, 12)),
            body: |t, v, c| {
                let y = t.reshape(v[0], &[3, 4])?;
                let y = t.exp(y);
                project(t, y, &c[0])
            },
        },
        Case {
            name: "cosine",
            draw: |r| (vec![uniform(r, &[5]), uniform(r, &[5])], Vec::new()),
            body: |t, v, _| t.cosine(v[0], v[1]),
        },
        unary!("logsumexp", [6], uniform, |t, x| Ok(t.logsumexp(x))),
        unary!("max", [6], uniform, |t, x| {
            let m = t.max(x);
            Ok(t.exp(m))
        }),
        unary!("min", [6], uniform, |t, x| {
            let m = t.min(x);
            Ok(t.exp(m))
        }),
    ]
}

/// Frame embeddings plus a fixed segmentation with three cycles and three
/// intervals on ten frames.
fn loss_draw(r: &mut SplitMix64) -> (Vec<Tensor>, Vec<Tensor>) {
    let e = uniform(r, &[10, 4]);
    let p = uniform(r, &[10]);
    let g = gaussianize_spans(&loss_cycles(), 10).expect("valid spans").values;
    (vec![e, p], vec![g])
}

fn loss_cycles() -> Vec<CycleSpan> {
    vec![CycleSpan::new(1, 3), CycleSpan::new(4, 6), CycleSpan::new(8, 9)]
}

fn refs_of(t: &mut Tape, e: Var, phases: usize) -> Result<crate::priors::ReferenceEmbeddings> {
    let cycles = loss_cycles();
    let intervals = intervals_between(&cycles, 10, 1);
    reference_embeddings(t, e, &cycles, &intervals, phases)
}

fn loss_cases() -> Vec<Case> {
    vec![
        Case {
            name: "pull_loss",
            draw: loss_draw,
            body: |t, v, _| {
                let refs = refs_of(t, v[0], 1)?;
                pull_loss(t, &refs)
            },
        },
        Case {
            name: "phase_pull_loss",
            draw: loss_draw,
            body: |t, v, _| {
                let refs = refs_of(t, v[0], 2)?;
                phase_pull_loss(t, &refs, 2)
            },
        },
        Case {
            name: "push_loss",
            draw: loss_draw,
            body: |t, v, _| {
                let refs = refs_of(t, v[0], 1)?;
                push_loss(t, &refs)
            },
        },
        Case {
            name: "regression_loss",
            draw: loss_draw,
            body: |t, v, c| {
                let g = t.constant(c[0].clone());
                regression_loss(t, v[1], g)
            },
        },
        Case {
            name: "combined_loss",
            draw: loss_draw,
            body: |t, v, c| {
                let refs = refs_of(t, v[0], 1)?;
                let g = t.constant(c[0].clone());
                let w = LossWeights {
                    alpha: 0.7,
                    beta: 1.3,
                    gamma: 0.9,
                };
                combined_loss(t, v[1], g, &refs, &w, 1)
            },
        },
        Case {
            name: "contrastive_loss",
            draw: loss_draw,
            body: |t, v, _| {
                let refs = refs_of(t, v[0], 1)?;
                contrastive_loss(t, &refs, 0.5)
            },
        },
        Case {
            name: "triplet_loss",
            draw: loss_draw,
            body: |t, v, _| {
                let refs = refs_of(t, v[0], 1)?;
                triplet_loss(t, &refs, 2.0)
            },
        },
    ]
}

/// Configuration of the end-to-end check: `L=8`, `D_in=4`, `d_model=16`.
pub fn reduced_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        fusion_channels: 4,
        head_hidden: 8,
        ffn_hidden: 8,
        ..ModelConfig::new(8, 4)
    }
}

/// Smallest ReLU pre-activation the end-to-end check accepts, so that no
/// finite-difference step crosses a kink.
pub const KINK_MARGIN: f64 = 1e-4;

const MAX_INPUT_DRAWS: u64 = 64;

/// Gradient of the combined loss with respect to every model parameter.
///
/// The input is redrawn until every ReLU pre-activation clears
/// [`KINK_MARGIN`]; parameters are fixed by `seed`.
pub fn model_check(seed: u64) -> Result<crate::gradcheck::GradCheckReport> {
    let cfg = reduced_model_config();
    let params = ModelParams::init(&cfg, seed)?;
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = params.tensors.values().cloned().collect();
    let cycles = vec![CycleSpan::new(0, 2), CycleSpan::new(4, 6)];
    let intervals = intervals_between(&cycles, cfg.len, 1);
    let g = gaussianize_spans(&cycles, cfg.len)?.values;
    let loss = |tape: &mut Tape, vars: &[Var], x: &Tensor| -> Result<Var> {
        let p = crate::model::ParamVars {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        };
        let xv = tape.constant(x.clone());
        let out = forward(tape, &p, xv, &cfg)?;
        let refs = reference_embeddings(tape, out.embeddings, &cycles, &intervals, 1)?;
        let gv = tape.constant(g.clone());
        combined_loss(tape, out.density, gv, &refs, &LossWeights::default(), 1)
    };

    let mut chosen = None;
    for draw in 0..MAX_INPUT_DRAWS {
        let mut r = rng::purpose_stream(seed, "gradcheck-model", draw);
        let x = uniform(&mut r, &[cfg.len, cfg.input_dim]);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        loss(&mut tape, &vars, &x)?;
        if tape.relu_margin().map_or(true, |m| m >= KINK_MARGIN) {
            chosen = Some(x);
            break;
        }
    }
    let x = chosen.ok_or_else(|| {
        Error::Degenerate(format!("no input within {MAX_INPUT_DRAWS} draws keeps ReLUs off their kinks"))
    })?;
    grad_check_many(|tape, vars| loss(tape, vars, &x), &inputs, EPS)
}

fn run_case(case: &Case, seeds: u64, tolerance: f64) -> Result<SuiteCheck> {
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for seed in 0..seeds {
        let mut r = rng::purpose_stream(seed, case.name, 0);
        let (inputs, consts) = (case.draw)(&mut r);
        let body = case.body;
        let report = grad_check_many(|t, v| body(t, v, &consts), &inputs, EPS)?;
        worst = worst.max(report.max_rel_error);
        coordinates += report.coordinates;
    }
    Ok(SuiteCheck {
        name: case.name.to_string(),
        tolerance,
        max_rel_error: worst,
        seeds,
        coordinates,
    })
}

/// Runs every op and loss check on `seeds` seeds each.
pub fn run_component_checks(seeds: u64) -> Result<Vec<SuiteCheck>> {
    cases()
        .iter()
        .chain(loss_cases().iter())
        .map(|c| run_case(c, seeds, OP_TOLERANCE))
        .collect()
}

pub fn run_model_check(seeds: u64) -> Result<SuiteCheck> {
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for seed in 0..seeds {
        let report = model_check(seed)?;
        worst = worst.max(report.max_rel_error);
        coordinates += report.coordinates;
    }
    Ok(SuiteCheck {
        name: "model_end_to_end".into(),
        tolerance: MODEL_TOLERANCE,
        max_rel_error: worst,
        seeds,
        coordinates,
    })
}

/// The whole sweep: components first, then the end-to-end model.
pub fn run_suite(seeds: u64) -> Result<Vec<SuiteCheck>> {
    let mut out = run_component_checks(seeds)?;
    out.push(run_model_check(seeds)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_pass_on_two_seeds() {
        for check in run_component_checks(2).unwrap() {
            assert!(check.passes(), "{check:?}");
        }
    }

    #[test]
    fn model_passes_on_one_seed() {
        let check = run_model_check(1).unwrap();
        assert!(check.passes(), "{check:?}");
        assert!(check.coordinates > 1000);
    }
}
