//! Training loop, evaluation metrics, the ablation harness and embedding export.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{forward, predict, rounded_count, ModelConfig, ModelParams};
use crate::priors::{objective, reference_embeddings, LossKind, LossWeights, VariantParams};
use crate::rca::{compute_tau, rca_apply, RcaConfig};
use crate::rng;
use crate::sequence::{derive_intervals, gaussianize, resample, FeatureSequence};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

/// Everything a training run needs besides the data. Serialized flat so a
/// config file is a single JSON object of key/value pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub margin: f64,
    pub phases: usize,
    pub rca: Switch,
    /// `None` sets the threshold to the mean training count.
    pub tau: Option<f64>,
    pub prob: f64,
    /// Frames every sequence is resampled to.
    #[serde(alias = "L")]
    pub len: usize,
    pub seed: u64,
    pub d_model: usize,
    pub heads: usize,
    pub scales: Vec<usize>,
    pub fusion_channels: usize,
    pub head_hidden: usize,
    pub ffn_hidden: usize,
    pub encoder_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::new(64, 1);
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossKind::P2l,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            temperature: 0.07,
            margin: 2.0,
            phases: 1,
            rca: Switch::On,
            tau: None,
            prob: 0.5,
            len: m.len,
            seed: 0,
            d_model: m.d_model,
            heads: m.heads,
            scales: m.scales,
            fusion_channels: m.fusion_channels,
            head_hidden: m.head_hidden,
            ffn_hidden: m.ffn_hidden,
            encoder_layers: m.encoder_layers,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        self.weights().validate()?;
        self.variant_params().validate()?;
        if let Some(tau) = self.tau {
            if !(tau >= 1.0 && tau.is_finite()) {
                return bad(format!("tau must be >= 1, got {tau}"));
            }
        }
        if !(0.0..=1.0).contains(&self.prob) {
            return bad(format!("prob must lie in [0, 1], got {}", self.prob));
        }
        self.model_config(1).validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn variant_params(&self) -> VariantParams {
        VariantParams {
            temperature: self.temperature,
            margin: self.margin,
            phases: self.phases,
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            len: self.len,
            input_dim,
            d_model: self.d_model,
            heads: self.heads,
            scales: self.scales.clone(),
            fusion_channels: self.fusion_channels,
            head_hidden: self.head_hidden,
            ffn_hidden: self.ffn_hidden,
            encoder_layers: self.encoder_layers,
            temporal_kernel: 3,
        }
    }
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Mean relative absolute error of rounded predictions. Sequences with a
/// ground-truth count of zero are skipped.
pub fn mae(preds: &[f64], gts: &[usize]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth counts",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    let mut k = 0usize;
    for (&p, &g) in preds.iter().zip(gts) {
        if g == 0 {
            continue;
        }
        total += (rounded_count(p) - g as i64).abs() as f64 / g as f64;
        k += 1;
    }
    let skipped = gts.len() - k;
    if skipped > 0 {
        log::warn!("{skipped} zero-count sequences left out of MAE");
    }
    if k == 0 {
        return Err(Error::Empty("no sequence with a positive count".into()));
    }
    Ok(total / k as f64)
}

/// Fraction of rounded predictions within one of the ground truth.
pub fn obo(preds: &[f64], gts: &[usize]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth counts",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("no predictions".into()));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(&p, &g)| (rounded_count(p) - g as i64).abs() <= 1)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub ground_truth: usize,
    pub predicted: f64,
    pub rounded: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub records: Vec<EvalRecord>,
    pub mae: f64,
    pub obo: f64,
}

impl EvalReport {
    pub fn from_predictions(split: &str, ids: &[String], gts: &[usize], preds: &[f64]) -> Result<Self> {
        let mae = mae(preds, gts)?;
        let obo = obo(preds, gts)?;
        let records = ids
            .iter()
            .zip(gts)
            .zip(preds)
            .map(|((id, &g), &p)| EvalRecord {
                id: id.clone(),
                ground_truth: g,
                predicted: p,
                rounded: rounded_count(p),
            })
            .collect();
        Ok(Self {
            split: split.to_string(),
            records,
            mae,
            obo,
        })
    }

    /// A summary line `{split, mae, obo, sequences}` followed by one line
    /// per record.
    pub fn to_jsonl(&self) -> Result<String> {
        let summary = ReportSummary {
            split: self.split.clone(),
            mae: self.mae,
            obo: self.obo,
            sequences: self.records.len(),
        };
        let mut out = serde_json::to_string(&summary)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or_else(|| Error::Invalid("empty evaluation report".into()))?;
        let summary: ReportSummary = serde_json::from_str(head)?;
        let records = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EvalRecord>, _>>()?;
        if records.len() != summary.sequences {
            return Err(Error::Invalid(format!(
                "report lists {} sequences but holds {} records",
                summary.sequences,
                records.len()
            )));
        }
        Ok(Self {
            split: summary.split,
            records,
            mae: summary.mae,
            obo: summary.obo,
        })
    }

    /// Recomputes MAE and OBO from the per-sequence records.
    pub fn recompute(&self) -> Result<(f64, f64)> {
        let preds: Vec<f64> = self.records.iter().map(|r| r.predicted).collect();
        let gts: Vec<usize> = self.records.iter().map(|r| r.ground_truth).collect();
        Ok((mae(&preds, &gts)?, obo(&preds, &gts)?))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportSummary {
    split: String,
    mae: f64,
    obo: f64,
    sequences: usize,
}

fn check_feature_dim(data: &[FeatureSequence], cfg: &ModelConfig) -> Result<()> {
    match data.iter().find(|s| s.feature_dim() != cfg.input_dim) {
        Some(s) => Err(Error::Config(format!(
            "sequence {} has feature_dim {}, model expects {}",
            s.id,
            s.feature_dim(),
            cfg.input_dim
        ))),
        None => Ok(()),
    }
}

/// Predicts the count of every sequence after resampling it to the model length.
pub fn evaluate(split: &str, data: &[FeatureSequence], params: &ModelParams, cfg: &ModelConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty(format!("split {split} has no sequences")));
    }
    params.check(cfg)?;
    check_feature_dim(data, cfg)?;
    let preds = data
        .par_iter()
        .map(|s| {
            let r = resample(s, cfg.len)?;
            predict(params, &r.features, cfg).map(|(_, p)| p.total())
        })
        .collect::<Result<Vec<f64>>>()?;
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    let gts: Vec<usize> = data.iter().map(|s| s.count).collect();
    EvalReport::from_predictions(split, &ids, &gts, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub pull: f64,
    pub push: f64,
    pub regression: f64,
    pub variant: f64,
    /// Sequences whose variant loss could not be evaluated.
    pub skipped_variant: usize,
    pub rca_resampled: usize,
    pub val_mae: Option<f64>,
    pub val_obo: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    /// Parameters at the epoch with the lowest validation MAE, or after the
    /// last epoch when there is no validation split.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

struct SequenceStep {
    grads: BTreeMap<String, Tensor>,
    total: f64,
    pull: f64,
    push: f64,
    regression: f64,
    variant: f64,
    skipped: bool,
}

fn sequence_step(
    seq: &FeatureSequence,
    params: &ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<SequenceStep> {
    let r = resample(seq, model.len)?;
    let g = gaussianize(&r, model.len)?;
    let intervals = derive_intervals(&r, 1);
    let mut tape = Tape::new();
    let p = params.register(&mut tape, true);
    let x = tape.constant(r.features.clone());
    let out = forward(&mut tape, &p, x, model)?;
    let refs = if cfg.loss.needs_embeddings() {
        Some(reference_embeddings(&mut tape, out.embeddings, &r.cycles, &intervals, cfg.phases)?)
    } else {
        None
    };
    let gv = tape.constant(g.values);
    let terms = objective(
        &mut tape,
        cfg.loss,
        out.density,
        gv,
        refs.as_ref(),
        &cfg.weights(),
        &cfg.variant_params(),
    )?;
    let total = tape.scalar(terms.total);
    if !total.is_finite() {
        return Err(Error::Divergence(format!("loss {total} on sequence {}", seq.id)));
    }
    let mut grads = tape.backward(terms.total)?;
    let grads = p.vars.iter().map(|(k, v)| (k.clone(), grads.take(*v))).collect();
    Ok(SequenceStep {
        grads,
        total,
        pull: terms.pull,
        push: terms.push,
        regression: terms.regression,
        variant: terms.variant,
        skipped: terms.skipped_variant,
    })
}

/// Trains from a seeded initialization. Deterministic for fixed inputs.
pub fn train(train_set: &[FeatureSequence], val_set: &[FeatureSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split has no sequences".into()));
    }
    let model = cfg.model_config(train_set[0].feature_dim());
    check_feature_dim(train_set, &model)?;
    check_feature_dim(val_set, &model)?;
    let rca = if cfg.rca.is_on() {
        let tau = match cfg.tau {
            Some(t) => t,
            None => compute_tau(train_set)?.max(1.0),
        };
        let rca = RcaConfig {
            tau,
            prob: cfg.prob,
            seed: cfg.seed,
        };
        rca.validate()?;
        Some(rca)
    } else {
        None
    };

    let mut params = ModelParams::init(&model, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::purpose_stream(cfg.seed, "shuffle", epoch as u64));
        let mut rca_rng = rng::purpose_stream(cfg.seed, "rca", epoch as u64);
        let mut rca_resampled = 0;
        let mut epoch_seqs = Vec::with_capacity(order.len());
        for &i in &order {
            match &rca {
                Some(rc) => {
                    let out = rca_apply(&train_set[i], rc, &mut rca_rng)?;
                    rca_resampled += usize::from(out.resampled);
                    epoch_seqs.push(out.sequence);
                }
                None => epoch_seqs.push(train_set[i].clone()),
            }
        }

        let mut sums = [0.0f64; 5];
        let mut skipped = 0;
        for batch in epoch_seqs.chunks(cfg.batch_size) {
            let steps = batch
                .par_iter()
                .map(|s| sequence_step(s, &params, &model, cfg))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / steps.len() as f64;
            let mut merged: BTreeMap<String, Tensor> = BTreeMap::new();
            for step in &steps {
                for (name, g) in &step.grads {
                    match merged.get_mut(name) {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, b)| *a += b),
                        None => {
                            merged.insert(name.clone(), g.clone());
                        }
                    }
                }
                sums[0] += step.total;
                sums[1] += step.pull;
                sums[2] += step.push;
                sums[3] += step.regression;
                sums[4] += step.variant;
                skipped += usize::from(step.skipped);
            }
            for g in merged.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam.step(&mut params, &merged);
            if let Some((name, _)) = params.tensors.iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::Divergence(format!("parameter {name} became non-finite in epoch {epoch}")));
            }
        }
        let n = epoch_seqs.len() as f64;
        let (val_mae, val_obo) = if val_set.is_empty() {
            (None, None)
        } else {
            let report = evaluate("val", val_set, &params, &model)?;
            (Some(report.mae), Some(report.obo))
        };
        let entry = EpochLog {
            epoch,
            train_loss: sums[0] / n,
            pull: sums[1] / n,
            push: sums[2] / n,
            regression: sums[3] / n,
            variant: sums[4] / n,
            skipped_variant: skipped,
            rca_resampled,
            val_mae,
            val_obo,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val_mae {:?} val_obo {:?}",
            entry.train_loss,
            val_mae,
            val_obo
        );
        log.push(entry);
        match (val_mae, &best) {
            (Some(m), Some((b, _, _))) if m >= *b => {}
            (Some(m), _) => best = Some((m, epoch, params.clone())),
            (None, _) => best = Some((f64::INFINITY, epoch, params.clone())),
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        params,
        best_epoch,
        log,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    Phases,
    Losses,
    Variants,
    Rca,
    SamplingRate,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 5] = [
        AblationSuite::Phases,
        AblationSuite::Losses,
        AblationSuite::Variants,
        AblationSuite::Rca,
        AblationSuite::SamplingRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSuite::Phases => "phases",
            AblationSuite::Losses => "losses",
            AblationSuite::Variants => "variants",
            AblationSuite::Rca => "rca",
            AblationSuite::SamplingRate => "sampling_rate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation suite {s:?}")))
    }

    /// Row labels with the configuration each row trains.
    pub fn cells(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationSuite::Phases => (1..=3)
                .map(|m| {
                    (
                        format!("phases={m}"),
                        with(&|c| {
                            c.loss = LossKind::P2l;
                            c.phases = m;
                        }),
                    )
                })
                .collect(),
            AblationSuite::Losses => [
                ("none", 0.0, 0.0, LossKind::RegressionOnly),
                ("pull_only", 1.0, 0.0, LossKind::P2l),
                ("push_only", 0.0, 1.0, LossKind::P2l),
                ("pull_push", 1.0, 1.0, LossKind::P2l),
            ]
            .into_iter()
            .map(|(label, a, b, kind)| {
                (
                    label.to_string(),
                    with(&|c| {
                        c.loss = kind;
                        c.alpha = a;
                        c.beta = b;
                    }),
                )
            })
            .collect(),
            AblationSuite::Variants => [LossKind::P2l, LossKind::Contrastive, LossKind::Triplet]
                .into_iter()
                .map(|k| (k.name().to_string(), with(&|c| c.loss = k)))
                .collect(),
            AblationSuite::Rca => [Switch::On, Switch::Off]
                .into_iter()
                .map(|s| {
                    let label = if s.is_on() { "rca=on" } else { "rca=off" };
                    (label.to_string(), with(&|c| c.rca = s))
                })
                .collect(),
            AblationSuite::SamplingRate => [64, 128]
                .into_iter()
                .map(|l| (format!("L={l}"), with(&|c| c.len = l)))
                .collect(),
        }
    }
}

/// One table row with the test reports of every seed behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub suite: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub median_mae: f64,
    pub median_obo: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationCell {
    pub fn from_reports(suite: &str, config: &str, seeds: Vec<u64>, reports: Vec<EvalReport>) -> Self {
        let maes: Vec<f64> = reports.iter().map(|r| r.mae).collect();
        let obos: Vec<f64> = reports.iter().map(|r| r.obo).collect();
        Self {
            suite: suite.to_string(),
            config: config.to_string(),
            seeds,
            median_mae: median(&maes),
            median_obo: median(&obos),
            reports,
        }
    }
}

/// Trains every cell of `suite` on `seed_count` consecutive seeds starting at
/// `base.seed` and evaluates each run on `test_set`.
pub fn ablate(
    suite: AblationSuite,
    base: &TrainConfig,
    seed_count: usize,
    train_set: &[FeatureSequence],
    val_set: &[FeatureSequence],
    test_set: &[FeatureSequence],
) -> Result<Vec<AblationCell>> {
    if seed_count == 0 {
        return Err(Error::Config("seed_count must be positive".into()));
    }
    let cells = suite.cells(base);
    for (_, c) in &cells {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..seed_count as u64).map(move |s| (c, s)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(c, s)| {
            let mut cfg = cells[c].1.clone();
            cfg.seed = base.seed + s;
            let out = train(train_set, val_set, &cfg)?;
            evaluate("test", test_set, &out.params, &out.model)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = reports.into_iter();
    Ok(cells
        .into_iter()
        .map(|(label, _)| {
            let rs: Vec<EvalReport> = reports.by_ref().take(seed_count).collect();
            let seeds = (0..seed_count as u64).map(|s| base.seed + s).collect();
            AblationCell::from_reports(suite.name(), &label, seeds, rs)
        })
        .collect())
}

/// CSV with header `suite,config,seed_count,median_MAE,median_OBO`.
pub fn ablation_csv(cells: &[AblationCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["suite", "config", "seed_count", "median_MAE", "median_OBO"])
        .map_err(csv_err)?;
    for c in cells {
        w.write_record([
            c.suite.clone(),
            c.config.clone(),
            c.reports.len().to_string(),
            format!("{:.6}", c.median_mae),
            format!("{:.6}", c.median_obo),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

/// One exported segment embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentEmbedding {
    pub id: String,
    pub kind: &'static str,
    pub start: usize,
    pub end: usize,
    pub features: Vec<f64>,
}

/// Reference embeddings of every cycle and interval, in temporal order.
/// Segment bounds refer to the resampled sequence.
pub fn export_embeddings(
    data: &[FeatureSequence],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<SegmentEmbedding>> {
    params.check(cfg)?;
    check_feature_dim(data, cfg)?;
    let per_seq = data
        .par_iter()
        .map(|s| {
            let r = resample(s, cfg.len)?;
            let intervals = derive_intervals(&r, 1);
            let mut tape = Tape::new();
            let p = params.register(&mut tape, false);
            let x = tape.constant(r.features.clone());
            let out = forward(&mut tape, &p, x, cfg)?;
            let refs = reference_embeddings(&mut tape, out.embeddings, &r.cycles, &intervals, 1)?;
            let mut rows: Vec<SegmentEmbedding> = r
                .cycles
                .iter()
                .zip(&refs.per_cycle)
                .map(|(c, v)| (c.start, c.end, "cycle", *v))
                .chain(
                    intervals
                        .iter()
                        .zip(&refs.per_interval)
                        .map(|(iv, v)| (iv.start, iv.end, "interval", *v)),
                )
                .map(|(start, end, kind, v)| SegmentEmbedding {
                    id: s.id.clone(),
                    kind,
                    start,
                    end,
                    features: tape.value(v).data().to_vec(),
                })
                .collect();
            rows.sort_by_key(|r| r.start);
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seq.into_iter().flatten().collect())
}

/// CSV with header `id,kind,start,end,f0,...`.
pub fn embeddings_csv(rows: &[SegmentEmbedding]) -> Result<String> {
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "kind".into(), "start".into(), "end".into()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.kind.to_string(), r.start.to_string(), r.end.to_string()];
        rec.extend(r.features.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
