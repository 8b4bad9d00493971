use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("stage `{stage}` needs upstream artifact {path}")]
    MissingUpstream { stage: String, path: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_err(context: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Shape {
        context: context.into(),
        detail: detail.into(),
    }
}
