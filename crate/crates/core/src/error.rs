use thiserror::Error;

/// Errors raised by geometry, synthesis, simulation and estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular block: |m22| = {value:e} is below {threshold:e}")]
    SingularBlock { value: f64, threshold: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value at t = {t}: {what}")]
    NonFinite { t: f64, what: String },

    #[error("state blow-up at t = {t}: |x| = {norm:e}")]
    BlowUp { t: f64, norm: f64 },

    #[error("insufficient samples: {found} qualifying, {required} required")]
    InsufficientSamples { found: usize, required: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
