//! Shared fixtures for the benchmarks.

use repcount_core::model::{ModelConfig, ModelParams};
use repcount_core::sequence::FeatureSequence;
use repcount_core::synth::{gen_sequence, GenConfig};

/// Model width used by the desk-scale training runs.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        fusion_channels: 8,
        head_hidden: 32,
        ffn_hidden: 32,
        ..ModelConfig::new(64, 16)
    }
}

pub fn fixture(cfg: &ModelConfig) -> (ModelParams, FeatureSequence) {
    let params = ModelParams::init(cfg, 0).expect("valid config");
    let gen = GenConfig {
        len: cfg.len,
        feature_dim: cfg.input_dim,
        ..GenConfig::default()
    };
    (params, gen_sequence(&gen, 0).expect("feasible generator config"))
}
