use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum MfgError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("control {0:?} lies outside the admissible control box")]
    InvalidControl(Vec<f64>),

    #[error("atom {atom} has no particles assigned")]
    DegenerateAtom { atom: usize },

    #[error("incompatible flows: {0}")]
    IncompatibleFlows(String),

    #[error("numerical blowup in state at step {step}")]
    NumericalBlowup { step: usize },

    #[error("regression basis degenerate at step {step}: effective rank {rank} < {dim}")]
    BasisDegeneracy { step: usize, rank: usize, dim: usize },

    #[error("under-sampled regression at step {step}: {alive} alive paths for basis dimension {dim}")]
    UnderSampled { step: usize, alive: usize, dim: usize },

    #[error("under-resolved noise grid: {0}")]
    UnderResolvedGrid(String),

    #[error("Hamiltonian maximization failed: {0}")]
    MaximizationFailure(String),

    #[error("validation error at `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl MfgError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        MfgError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, MfgError>;
