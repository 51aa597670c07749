use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("capacity exceeded: need {needed} positions, model supports {limit}")]
    Capacity { needed: usize, limit: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("generation error: {0}")]
    Generation(String),

    /// Training hit a NaN/inf loss. `snapshot` holds the cartridge, encoded in
    /// the `.crtg` format, as it was when the bad loss was observed.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, snapshot: Vec<u8> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> LabError {
    LabError::InvalidInput(msg.into())
}
