use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid setting: {0}")]
    InvalidSetting(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("non-finite value in {what} at {location}")]
    NonFinite { what: String, location: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("control family is empty")]
    EmptyFamily,

    #[error("volatility control outside band: gamma={gamma} at step {step}, band [{low}, {high}]")]
    ControlOutOfBand {
        gamma: f64,
        step: usize,
        low: f64,
        high: f64,
    },

    #[error("problem is not certified ({0}); pass force to solve anyway")]
    NotCertified(String),

    #[error("lipschitz audit failed: {0}")]
    Audit(String),

    #[error("linearized coefficient bound violated: {0}")]
    BoundViolation(String),
}

impl Error {
    pub fn non_finite(what: impl Into<String>, location: impl Into<String>) -> Self {
        Error::NonFinite {
            what: what.into(),
            location: location.into(),
        }
    }

    /// True for errors raised by the numerics rather than by the input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
