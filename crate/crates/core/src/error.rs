use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient produced by op #{node} ({op})")]
    NonFiniteGradient { node: usize, op: &'static str },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("value outside distribution support: {0}")]
    OutOfSupport(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the training phase it came from.
    pub fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    /// True for errors caused by NaN/Inf values anywhere in the pipeline.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::NonFiniteGradient { .. } => true,
            Error::Phase { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
