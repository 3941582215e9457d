use thiserror::Error;

pub type Result<T> = std::result::Result<T, EspError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EspError {
    /// Field or coupling evaluated at zero separation from a source.
    #[error("singular Green's function: evaluation point coincides with a source ({0})")]
    Singular(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// `Z_L + Z` (or another system matrix) is numerically singular.
    #[error("system near resonance: condition number {cond:.3e}")]
    NearResonance { cond: f64 },

    #[error("passivity violated: radiated power {0:.3e} W is negative")]
    PassivityViolation(f64),

    #[error("training diverged: loss {loss:.3e} exceeds 10x the initial loss {initial:.3e}")]
    Diverged { loss: f64, initial: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl EspError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        EspError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
