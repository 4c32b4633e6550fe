use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A physical parameter violates its invariant.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    /// Malformed or inconsistent configuration (unknown keys, bad syntax, guards).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// True for failures of the input (config, parameters, files) rather than
    /// of an estimation or fit stage.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. } | Error::Config(_) | Error::Io(_)
        )
    }
}
