use thiserror::Error;

/// Errors raised across model adapters, attribution, metrics and the harness.
#[derive(Debug, Error)]
pub enum DixError {
    /// A layer, shape or dimension does not line up with what the callee expects.
    #[error("addressing error: {0}")]
    Addressing(String),

    /// Non-finite values appeared during model evaluation.
    #[error("numerical error at {layer}: {detail}")]
    Numerical { layer: String, detail: String },

    /// The model or plugin cannot perform the requested operation.
    #[error("capability error: {0}")]
    Capability(String),

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// A checkpoint could not be turned into a model.
    #[error("load error: {0}")]
    Load(String),

    /// A serialized artifact is malformed.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    /// A multi-step protocol (e.g. training to a target accuracy) did not complete.
    #[error("protocol failure: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DixError>;

impl DixError {
    pub(crate) fn addressing(msg: impl Into<String>) -> Self {
        DixError::Addressing(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DixError::Configuration(msg.into())
    }

    pub(crate) fn capability(msg: impl Into<String>) -> Self {
        DixError::Capability(msg.into())
    }
}
