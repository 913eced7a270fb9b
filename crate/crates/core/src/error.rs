use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation requires.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Input on which an operation is undefined, e.g. a zero-norm vector
    /// handed to cosine similarity.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    /// A stored dataset, checkpoint or annotation violates an invariant.
    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("cycle of {len} frames cannot be split into {phases} phases")]
    PhasePartition { len: usize, phases: usize },

    #[error("loss not applicable: {0}")]
    InapplicableLoss(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short stable name of the variant, for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Degenerate(_) => "degenerate",
            Error::Config(_) => "config",
            Error::Empty(_) => "empty",
            Error::Invalid(_) => "invalid_data",
            Error::Generation(_) => "generation",
            Error::PhasePartition { .. } => "phase_partition",
            Error::InapplicableLoss(_) => "inapplicable_loss",
            Error::Divergence(_) => "divergence",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Whether the failure stems from bad user input (files, configs, shapes)
    /// rather than from something going wrong during a computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Divergence(_) | Error::Generation(_) | Error::Degenerate(_)
        )
    }
}
