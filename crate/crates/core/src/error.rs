use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite iterate at unrolled iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    TrainingDivergence { epoch: usize, batch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("architecture mismatch at tensor `{tensor}`: {reason}")]
    ArchitectureMismatch { tensor: String, reason: String },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Divergence { .. } => "divergence",
            Error::TrainingDivergence { .. } => "training_divergence",
            Error::Config(_) => "config",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::CorruptPayload(_) => "corrupt_payload",
            Error::ArchitectureMismatch { .. } => "architecture_mismatch",
            Error::MissingFile(_) => "missing_file",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
