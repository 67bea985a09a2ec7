use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("degenerate field: {0}")]
    DegenerateField(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("under-resolved singularity: regularization width {width} < h/2 = {half_spacing}")]
    UnderResolved { width: f64, half_spacing: f64 },

    #[error("step failure: energy did not decrease after {backtracks} backtracks at iteration {iteration}")]
    StepFailure { iteration: usize, backtracks: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("inapplicable region: {0}")]
    InapplicableRegion(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("malformed snapshot: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by invalid user input (as opposed to numerics).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Configuration(_)
                | Error::Input(_)
                | Error::Domain(_)
                | Error::UnderResolved { .. }
                | Error::Json(_)
                | Error::Format(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
