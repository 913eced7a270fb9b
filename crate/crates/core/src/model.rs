//! The counting network.
//!
//! Frame features are projected to `d_model`, mixed by a temporal
//! convolution, pooled at several temporal scales, turned into per-head
//! self-similarity matrices, fused by a 2-D convolution into the frame
//! embeddings `E`, refined by transformer encoder layers and read out by a
//! three-layer head as a per-frame density.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::sequence::DensityMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per input sequence.
    pub len: usize,
    pub input_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub scales: Vec<usize>,
    pub fusion_channels: usize,
    pub head_hidden: usize,
    pub ffn_hidden: usize,
    pub encoder_layers: usize,
    pub temporal_kernel: usize,
}

impl ModelConfig {
    pub fn new(len: usize, input_dim: usize) -> Self {
        Self {
            len,
            input_dim,
            d_model: 512,
            heads: 4,
            scales: vec![1, 4, 8],
            fusion_channels: 32,
            head_hidden: 512,
            ffn_hidden: 512,
            encoder_layers: 1,
            temporal_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.len == 0 || self.input_dim == 0 || self.d_model == 0 {
            return bad("len, input_dim and d_model must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.scales.is_empty()
            || self.scales[0] == 0
            || self.scales.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!("scales {:?} must be ascending and >= 1", self.scales));
        }
        if self.fusion_channels == 0 || self.head_hidden == 0 || self.ffn_hidden == 0 {
            return bad("fusion_channels, head_hidden and ffn_hidden must be positive".into());
        }
        if self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal_kernel {} must be odd", self.temporal_kernel));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn similarity_channels(&self) -> usize {
        self.scales.len() * self.heads
    }

    /// Every parameter name with its shape and fan-in, in a fixed order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>, Option<usize>)> {
        fn linear(out: &mut Vec<(String, Vec<usize>, Option<usize>)>, name: &str, fan_in: usize, fan_out: usize) {
            out.push((format!("{name}.weight"), vec![fan_in, fan_out], Some(fan_in)));
            out.push((format!("{name}.bias"), vec![fan_out], None));
        }
        let (d, dh) = (self.d_model, self.head_dim());
        let mut out = Vec::new();
        linear(&mut out, "input", self.input_dim, d);
        let k = self.temporal_kernel;
        out.push(("temporal.weight".into(), vec![k, d, d], Some(k * d)));
        out.push(("temporal.bias".into(), vec![d], None));
        for &s in &self.scales {
            for h in 0..self.heads {
                out.push((format!("similarity.s{s}.h{h}.query"), vec![d, dh], Some(d)));
                out.push((format!("similarity.s{s}.h{h}.key"), vec![d, dh], Some(d)));
            }
        }
        let (c, fc) = (self.similarity_channels(), self.fusion_channels);
        out.push(("fusion.weight".into(), vec![fc, c, 3, 3], Some(c * 9)));
        out.push(("fusion.bias".into(), vec![fc], None));
        linear(&mut out, "rows", self.len * fc, d);
        for l in 0..self.encoder_layers {
            out.push((format!("encoder.{l}.norm1.gamma"), vec![d], None));
            out.push((format!("encoder.{l}.norm1.beta"), vec![d], None));
            for p in ["query", "key", "value", "out"] {
                linear(&mut out, &format!("encoder.{l}.attn.{p}"), d, d);
            }
            out.push((format!("encoder.{l}.norm2.gamma"), vec![d], None));
            out.push((format!("encoder.{l}.norm2.beta"), vec![d], None));
            linear(&mut out, &format!("encoder.{l}.ff1"), d, self.ffn_hidden);
            linear(&mut out, &format!("encoder.{l}.ff2"), self.ffn_hidden, d);
        }
        let hh = self.head_hidden;
        linear(&mut out, "head.0", d, hh);
        linear(&mut out, "head.1", hh, hh);
        linear(&mut out, "head.2", hh, 1);
        out
    }
}

/// Named trainable tensors of the counting model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero, layer-norm gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::purpose_stream(seed, "init", 0);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in) in cfg.parameter_layout() {
            let t = match fan_in {
                Some(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape, data)?
                }
                None if name.ends_with(".gamma") => Tensor::full(&shape, 1.0),
                None => Tensor::zeros(&shape),
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// Checks names and shapes against `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = cfg.parameter_layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in layout {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    if !t.is_finite() {
                        return Err(Error::Invalid(format!("parameter {name} is not finite")));
                    }
                }
                Some(t) => {
                    return Err(Error::Invalid(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Invalid(format!("parameter {name} missing"))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors.get_mut(name).expect("known parameter")
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }
}

/// Tape handles of registered parameters.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter {name} missing")))
    }
}

fn linear(tape: &mut Tape, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Centered sliding mean of width `scale`; width 1 is the identity.
pub fn context_pool(tape: &mut Tape, f: Var, scale: usize) -> Result<Var> {
    if scale == 1 {
        return Ok(f);
    }
    tape.sliding_mean(f, scale)
}

/// Per-head attention weights `softmax(Q Kᵀ / sqrt(d_head))`, stacked into
/// `heads × L × L`.
pub fn similarity_maps(
    tape: &mut Tape,
    fs: Var,
    p: &ParamVars,
    cfg: &ModelConfig,
    scale: usize,
) -> Result<Var> {
    let inv = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wq = p.get(&format!("similarity.s{scale}.h{h}.query"))?;
        let wk = p.get(&format!("similarity.s{scale}.h{h}.key"))?;
        let q = tape.matmul(fs, wq)?;
        let k = tape.matmul(fs, wk)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, inv);
        maps.push(tape.softmax_rows(logits)?);
    }
    tape.stack(&maps)
}

/// 2-D convolution over the stacked similarity maps, then each frame's row
/// across all fused channels projected to `d_model`.
pub fn fuse_similarities(tape: &mut Tape, s_all: Var, p: &ParamVars, cfg: &ModelConfig) -> Result<Var> {
    let shape = tape.value(s_all).shape().to_vec();
    let expected = [cfg.similarity_channels(), cfg.len, cfg.len];
    if shape != expected {
        return Err(Error::Shape(format!(
            "similarity stack {shape:?}, expected {expected:?}"
        )));
    }
    let w = p.get("fusion.weight")?;
    let b = p.get("fusion.bias")?;
    let fused = tape.conv2d(s_all, w, b)?;
    let fused = tape.tanh(fused);
    let by_frame = tape.permute3(fused, [1, 0, 2])?;
    let rows = tape.reshape(by_frame, &[cfg.len, cfg.fusion_channels * cfg.len])?;
    linear(tape, p, "rows", rows)
}

fn self_attention(tape: &mut Tape, x: Var, p: &ParamVars, cfg: &ModelConfig, layer: usize) -> Result<Var> {
    let pre = format!("encoder.{layer}.attn");
    let q = linear(tape, p, &format!("{pre}.query"), x)?;
    let k = linear(tape, p, &format!("{pre}.key"), x)?;
    let v = linear(tape, p, &format!("{pre}.value"), x)?;
    let dh = cfg.head_dim();
    let inv = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, inv);
        let attn = tape.softmax_rows(logits)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let joined = tape.concat_cols(&heads)?;
    linear(tape, p, &format!("{pre}.out"), joined)
}

/// Pre-norm transformer encoder layer.
fn encoder_layer(tape: &mut Tape, x: Var, p: &ParamVars, cfg: &ModelConfig, layer: usize) -> Result<Var> {
    let pre = format!("encoder.{layer}");
    let n1 = tape.layer_norm(
        x,
        p.get(&format!("{pre}.norm1.gamma"))?,
        p.get(&format!("{pre}.norm1.beta"))?,
    )?;
    let a = self_attention(tape, n1, p, cfg, layer)?;
    let x = tape.add(x, a)?;
    let n2 = tape.layer_norm(
        x,
        p.get(&format!("{pre}.norm2.gamma"))?,
        p.get(&format!("{pre}.norm2.beta"))?,
    )?;
    let h = linear(tape, p, &format!("{pre}.ff1"), n2)?;
    let h = tape.relu(h);
    let h = linear(tape, p, &format!("{pre}.ff2"), h)?;
    tape.add(x, h)
}

/// Frame embeddings consumed by the repetition priors and the predicted density.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `L × d_model`.
    pub embeddings: Var,
    /// `L`.
    pub density: Var,
}

pub fn forward(tape: &mut Tape, p: &ParamVars, x: Var, cfg: &ModelConfig) -> Result<ForwardOutput> {
    let shape = tape.value(x).shape().to_vec();
    if shape != [cfg.len, cfg.input_dim] {
        return Err(Error::Shape(format!(
            "input {shape:?}, model expects [{}, {}]",
            cfg.len, cfg.input_dim
        )));
    }
    let w = p.get("input.weight")?;
    let h = tape.matmul_sorted(x, w)?;
    let h = tape.add_bias(h, p.get("input.bias")?)?;
    let f = tape.conv1d(h, p.get("temporal.weight")?, p.get("temporal.bias")?)?;
    let f = tape.relu(f);

    let mut maps = Vec::with_capacity(cfg.scales.len());
    for &s in &cfg.scales {
        let fs = context_pool(tape, f, s)?;
        maps.push(similarity_maps(tape, fs, p, cfg, s)?);
    }
    let stacked = tape.stack(&maps)?;
    let s_all = tape.reshape(stacked, &[cfg.similarity_channels(), cfg.len, cfg.len])?;
    let embeddings = fuse_similarities(tape, s_all, p, cfg)?;

    let mut z = embeddings;
    for layer in 0..cfg.encoder_layers {
        z = encoder_layer(tape, z, p, cfg, layer)?;
    }
    let z = linear(tape, p, "head.0", z)?;
    let z = tape.relu(z);
    let z = linear(tape, p, "head.1", z)?;
    let z = tape.relu(z);
    let z = linear(tape, p, "head.2", z)?;
    let density = tape.reshape(z, &[cfg.len])?;
    Ok(ForwardOutput { embeddings, density })
}

/// Forward pass without gradients, returning `(E, p)`.
pub fn predict(params: &ModelParams, features: &Tensor, cfg: &ModelConfig) -> Result<(Tensor, DensityMap)> {
    let mut tape = Tape::new();
    let p = params.register(&mut tape, false);
    let x = tape.constant(features.clone());
    let out = forward(&mut tape, &p, x, cfg)?;
    Ok((
        tape.value(out.embeddings).clone(),
        DensityMap::predicted(tape.value(out.density).clone()),
    ))
}

/// Predicted count: the plain sum of the density map.
pub fn count_readout(p: &DensityMap) -> f64 {
    p.total()
}

/// Integer count used by MAE and OBO (round half to even).
pub fn rounded_count(t: f64) -> i64 {
    t.round_ties_even() as i64
}
