use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs outside the admissible parameter domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Broken internal invariant, e.g. a degenerate mesh.
    #[error("internal error: {0}")]
    Internal(String),
    /// Conjugate gradients hit its iteration cap.
    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    /// Other numerical breakdown such as a singular dense system.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A source intensity is too large to represent.
    #[error("intensity overflow at t = {t}: magnitude about 1e{decimal_exponent:.0} exceeds 1e300")]
    IntensityOverflow { t: f64, decimal_exponent: f64 },
    /// Invalid configuration entry.
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },
    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for failures that count as a failed simulation: overflowing
    /// intensities, solver breakdown or other numerical trouble.
    pub fn is_numerical_failure(&self) -> bool {
        matches!(
            self,
            Error::IntensityOverflow { .. } | Error::NoConvergence { .. } | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
