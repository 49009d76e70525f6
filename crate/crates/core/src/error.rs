use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate attention row {row}: every entry is masked")]
    DegenerateAttention { row: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("spectral radius >= 1: power iteration diverged after {iterations} iterations")]
    Divergence { iterations: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("empty group {0}")]
    EmptyGroup(usize),

    #[error("{op} did not converge within {iterations} iterations")]
    NoConvergence { op: &'static str, iterations: usize },

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged { epoch: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

impl Error {
    /// Stable machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::DegenerateAttention { .. } => "degenerate_attention",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Divergence { .. } => "divergence",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::EmptyGroup(_) => "empty_group",
            Error::NoConvergence { .. } => "no_convergence",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
