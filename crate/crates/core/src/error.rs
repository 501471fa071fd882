use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration diverged at step {step} (t = {time})")]
    Diverged { step: usize, time: f64 },

    #[error("cycle not found: {0}")]
    CycleNotFound(String),

    #[error("tangent vector degenerate at grid index {index} (|f| = {norm:e})")]
    TangentDegenerate { index: usize, norm: f64 },

    #[error("dimension mismatch for {symbol}: expected {expected}, got {got}")]
    DimensionMismatch {
        symbol: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not contracting: spectral radius {spectral_radius} must stay below {bound}")]
    NotContracting { spectral_radius: f64, bound: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unsupported artifact: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::CycleNotFound(_)
                | Error::TangentDegenerate { .. }
                | Error::NotContracting { .. }
        )
    }
}
