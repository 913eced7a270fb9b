//! Repetition counting over per-frame feature sequences.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod priors;
pub mod rca;
pub mod rng;
pub mod sequence;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
