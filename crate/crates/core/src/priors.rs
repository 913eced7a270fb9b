//! Reference embeddings and the losses built on them: pull, push,
//! regression, their weighted combination, the phase-partitioned pull, and
//! the contrastive and triplet variants.
//!
//! All losses are recorded on a [`Tape`] so they can be differentiated with
//! respect to the frame embeddings they were pooled from.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sequence::{CycleSpan, IntervalSpan};
use crate::tensor::Tensor;

/// Per-phase cycle embeddings `[cycle][phase]` and their per-phase means.
#[derive(Clone, Debug)]
pub struct PhaseEmbeddings {
    pub per_cycle: Vec<Vec<Var>>,
    pub collective: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ReferenceEmbeddings {
    pub per_cycle: Vec<Var>,
    /// Mean of `per_cycle`; `None` for a cycle-free sequence.
    pub collective: Option<Var>,
    pub per_interval: Vec<Var>,
    pub per_phase: Option<PhaseEmbeddings>,
}

impl ReferenceEmbeddings {
    pub fn cycle_count(&self) -> usize {
        self.per_cycle.len()
    }

    pub fn interval_count(&self) -> usize {
        self.per_interval.len()
    }

    pub fn is_cycle_free(&self) -> bool {
        self.collective.is_none()
    }

    /// Builds embeddings directly from segment vectors (no phases).
    pub fn from_vectors(tape: &mut Tape, cycles: &[Tensor], intervals: &[Tensor]) -> Result<Self> {
        let per_cycle: Vec<Var> = cycles.iter().map(|t| tape.leaf(t.clone())).collect();
        let per_interval = intervals.iter().map(|t| tape.leaf(t.clone())).collect();
        let collective = mean_of(tape, &per_cycle)?;
        Ok(Self {
            per_cycle,
            collective,
            per_interval,
            per_phase: None,
        })
    }
}

fn mean_of(tape: &mut Tape, vectors: &[Var]) -> Result<Option<Var>> {
    if vectors.is_empty() {
        return Ok(None);
    }
    let stacked = tape.stack(vectors)?;
    Ok(Some(tape.mean_rows(stacked, 0, vectors.len() - 1)?))
}

/// Splits `[start, end]` into `phases` contiguous blocks whose sizes differ
/// by at most one, earlier blocks taking the remainder.
pub fn phase_blocks(start: usize, end: usize, phases: usize) -> Result<Vec<(usize, usize)>> {
    let len = end - start + 1;
    if phases == 0 || len < phases {
        return Err(Error::PhasePartition { len, phases });
    }
    let (base, rem) = (len / phases, len % phases);
    let mut out = Vec::with_capacity(phases);
    let mut cursor = start;
    for j in 0..phases {
        let size = base + usize::from(j < rem);
        out.push((cursor, cursor + size - 1));
        cursor += size;
    }
    Ok(out)
}

/// Mean-pooled segment embeddings of the frame embeddings `e` (`L×d`).
/// With `phases > 1` each cycle is also partitioned into phase blocks.
pub fn reference_embeddings(
    tape: &mut Tape,
    e: Var,
    cycles: &[CycleSpan],
    intervals: &[IntervalSpan],
    phases: usize,
) -> Result<ReferenceEmbeddings> {
    let per_cycle = cycles
        .iter()
        .map(|c| tape.mean_rows(e, c.start, c.end))
        .collect::<Result<Vec<_>>>()?;
    let per_interval = intervals
        .iter()
        .map(|iv| tape.mean_rows(e, iv.start, iv.end))
        .collect::<Result<Vec<_>>>()?;
    let collective = mean_of(tape, &per_cycle)?;
    let per_phase = if phases > 1 && !cycles.is_empty() {
        let mut blocks = Vec::with_capacity(cycles.len());
        for c in cycles {
            let row = phase_blocks(c.start, c.end, phases)?
                .into_iter()
                .map(|(s, t)| tape.mean_rows(e, s, t))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(row);
        }
        let collective = (0..phases)
            .map(|j| {
                let column: Vec<Var> = blocks.iter().map(|b| b[j]).collect();
                mean_of(tape, &column).map(|m| m.expect("non-empty"))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(PhaseEmbeddings {
            per_cycle: blocks,
            collective,
        })
    } else {
        None
    };
    Ok(ReferenceEmbeddings {
        per_cycle,
        collective,
        per_interval,
        per_phase,
    })
}

fn constant(tape: &mut Tape, v: f64) -> Var {
    tape.constant(Tensor::scalar(v))
}

/// `offset - mean(values)` for scalar nodes.
fn offset_minus_mean(tape: &mut Tape, values: &[Var], offset: f64) -> Result<Var> {
    let stacked = tape.stack(values)?;
    let mean = tape.mean(stacked);
    let neg = tape.neg(mean);
    let c = constant(tape, offset);
    tape.add(c, neg)
}

/// Mean cosine distance of every cycle embedding to the collective one.
/// Zero for a cycle-free sequence.
pub fn pull_loss(tape: &mut Tape, refs: &ReferenceEmbeddings) -> Result<Var> {
    let Some(r) = refs.collective else {
        return Ok(constant(tape, 0.0));
    };
    let cos = refs
        .per_cycle
        .iter()
        .map(|&rh| tape.cosine(rh, r))
        .collect::<Result<Vec<_>>>()?;
    offset_minus_mean(tape, &cos, 1.0)
}

/// Pull loss on phase embeddings: `(1/C) Σ_h Σ_j (1 - cos(R_hj, R^j))`.
/// With one phase this is [`pull_loss`].
pub fn phase_pull_loss(tape: &mut Tape, refs: &ReferenceEmbeddings, phases: usize) -> Result<Var> {
    if phases == 1 {
        return pull_loss(tape, refs);
    }
    if refs.is_cycle_free() {
        return Ok(constant(tape, 0.0));
    }
    let ph = refs
        .per_phase
        .as_ref()
        .filter(|p| p.collective.len() == phases)
        .ok_or_else(|| Error::Config(format!("no embeddings for {phases} phases")))?;
    let mut cos = Vec::with_capacity(refs.cycle_count() * phases);
    for blocks in &ph.per_cycle {
        for (j, &b) in blocks.iter().enumerate() {
            cos.push(tape.cosine(b, ph.collective[j])?);
        }
    }
    // (1/C) Σ (1 - cos) over C·M terms = M (1 - mean cos)
    let per_term = offset_minus_mean(tape, &cos, 1.0)?;
    Ok(tape.scale(per_term, phases as f64))
}

/// `(1/N) Σ_k exp(-(1 - cos(R̃_k, R)))`; zero when there are no intervals or
/// no cycles.
pub fn push_loss(tape: &mut Tape, refs: &ReferenceEmbeddings) -> Result<Var> {
    let Some(r) = refs.collective else {
        return Ok(constant(tape, 0.0));
    };
    if refs.per_interval.is_empty() {
        return Ok(constant(tape, 0.0));
    }
    let cos = refs
        .per_interval
        .iter()
        .map(|&rk| tape.cosine(rk, r))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack(&cos)?;
    let ones = tape.constant(Tensor::full(&[cos.len(), 1], 1.0));
    let shifted = tape.sub(stacked, ones)?;
    let e = tape.exp(shifted);
    Ok(tape.mean(e))
}

/// Mean squared error between predicted and ground-truth densities.
pub fn regression_loss(tape: &mut Tape, p: Var, g: Var) -> Result<Var> {
    if tape.value(p).len() != tape.value(g).len() {
        return Err(Error::Shape(format!(
            "density lengths {} and {}",
            tape.value(p).len(),
            tape.value(g).len()
        )));
    }
    let g = if tape.value(g).shape() == tape.value(p).shape() {
        g
    } else {
        let shape = tape.value(p).shape().to_vec();
        tape.reshape(g, &shape)?
    };
    let d = tape.sub(p, g)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// InfoNCE-style loss with the collective embedding as positive and every
/// cycle and interval embedding (the anchor included) as candidates.
pub fn contrastive_loss(tape: &mut Tape, refs: &ReferenceEmbeddings, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let Some(r) = refs.collective else {
        return Ok(constant(tape, 0.0));
    };
    let candidates: Vec<Var> = refs
        .per_cycle
        .iter()
        .chain(&refs.per_interval)
        .copied()
        .collect();
    let inv_t = 1.0 / temperature;
    let mut terms = Vec::with_capacity(refs.cycle_count());
    for &rh in &refs.per_cycle {
        let pos = tape.cosine(rh, r)?;
        let pos = tape.scale(pos, inv_t);
        let logits = candidates
            .iter()
            .map(|&c| tape.cosine(rh, c))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.stack(&logits)?;
        let logits = tape.scale(logits, inv_t);
        let lse = tape.logsumexp(logits);
        terms.push(tape.sub(lse, pos)?);
    }
    let stacked = tape.stack(&terms)?;
    Ok(tape.mean(stacked))
}

/// Hardest-positive / hardest-negative hinge with margin `margin`.
pub fn triplet_loss(tape: &mut Tape, refs: &ReferenceEmbeddings, margin: f64) -> Result<Var> {
    let (c, n) = (refs.cycle_count(), refs.interval_count());
    if c < 2 || n == 0 {
        return Err(Error::InapplicableLoss(format!(
            "triplet loss needs at least 2 cycles and 1 interval, got {c} and {n}"
        )));
    }
    let lambda = constant(tape, margin);
    let mut hinges = Vec::with_capacity(c);
    for (h, &rh) in refs.per_cycle.iter().enumerate() {
        let pos = refs
            .per_cycle
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != h)
            .map(|(_, &rc)| tape.cosine(rh, rc))
            .collect::<Result<Vec<_>>>()?;
        let neg = refs
            .per_interval
            .iter()
            .map(|&rk| tape.cosine(rh, rk))
            .collect::<Result<Vec<_>>>()?;
        let pos = tape.stack(&pos)?;
        let neg = tape.stack(&neg)?;
        let hardest_pos = tape.min(pos);
        let hardest_neg = tape.max(neg);
        let phi = tape.sub(hardest_pos, hardest_neg)?;
        let gap = tape.sub(lambda, phi)?;
        hinges.push(tape.relu(gap));
    }
    let stacked = tape.stack(&hinges)?;
    Ok(tape.mean(stacked))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantParams {
    pub temperature: f64,
    pub margin: f64,
    pub phases: usize,
}

impl Default for VariantParams {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            margin: 2.0,
            phases: 1,
        }
    }
}

impl VariantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.phases == 0 {
            return Err(Error::Config("phases must be at least 1".into()));
        }
        if !self.margin.is_finite() {
            return Err(Error::Config("margin must be finite".into()));
        }
        Ok(())
    }
}

/// Which embedding objective accompanies the regression loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Pull + push + regression, weighted by alpha, beta, gamma.
    P2l,
    /// alpha * contrastive + gamma * regression.
    Contrastive,
    /// alpha * triplet + gamma * regression.
    Triplet,
    /// gamma * regression.
    RegressionOnly,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::P2l => "p2l",
            LossKind::Contrastive => "contrastive",
            LossKind::Triplet => "triplet",
            LossKind::RegressionOnly => "regression_only",
        }
    }

    pub fn needs_embeddings(self) -> bool {
        self != LossKind::RegressionOnly
    }
}

/// Scalar total plus the component values that went into it.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub pull: f64,
    pub push: f64,
    pub regression: f64,
    pub variant: f64,
    /// Set when the selected variant could not be evaluated on this
    /// sequence and only the regression term was used.
    pub skipped_variant: bool,
}

/// `alpha * L_pull + beta * L_push + gamma * L_R`. Terms with zero weight are
/// not evaluated; the pull uses phase embeddings when `phases > 1`.
pub fn combined_loss(
    tape: &mut Tape,
    p: Var,
    g: Var,
    refs: &ReferenceEmbeddings,
    w: &LossWeights,
    phases: usize,
) -> Result<Var> {
    objective(tape, LossKind::P2l, p, g, Some(refs), w, &VariantParams { phases, ..Default::default() })
        .map(|t| t.total)
}

pub fn objective(
    tape: &mut Tape,
    kind: LossKind,
    p: Var,
    g: Var,
    refs: Option<&ReferenceEmbeddings>,
    w: &LossWeights,
    params: &VariantParams,
) -> Result<LossTerms> {
    let reg = regression_loss(tape, p, g)?;
    let mut terms = LossTerms {
        total: reg,
        pull: 0.0,
        push: 0.0,
        regression: tape.scalar(reg),
        variant: 0.0,
        skipped_variant: false,
    };
    let mut parts = vec![tape.scale(reg, w.gamma)];
    let need_refs = || {
        refs.ok_or_else(|| Error::Config(format!("{} loss needs reference embeddings", kind.name())))
    };
    match kind {
        LossKind::RegressionOnly => {}
        LossKind::P2l => {
            let refs = need_refs()?;
            if w.alpha != 0.0 {
                let pull = phase_pull_loss(tape, refs, params.phases)?;
                terms.pull = tape.scalar(pull);
                parts.push(tape.scale(pull, w.alpha));
            }
            if w.beta != 0.0 {
                let push = push_loss(tape, refs)?;
                terms.push = tape.scalar(push);
                parts.push(tape.scale(push, w.beta));
            }
        }
        LossKind::Contrastive | LossKind::Triplet => {
            let refs = need_refs()?;
            if w.alpha != 0.0 {
                let v = if kind == LossKind::Contrastive {
                    contrastive_loss(tape, refs, params.temperature)
                } else {
                    triplet_loss(tape, refs, params.margin)
                };
                match v {
                    Ok(v) => {
                        terms.variant = tape.scalar(v);
                        parts.push(tape.scale(v, w.alpha));
                    }
                    Err(Error::InapplicableLoss(_)) => terms.skipped_variant = true,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    let mut total = parts[0];
    for &part in &parts[1..] {
        total = tape.add(total, part)?;
    }
    terms.total = total;
    Ok(terms)
}
