use thiserror::Error;

/// Errors raised by model evaluation, estimation and inference.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("latent variance overflow: exp({0}) is not finite")]
    VarianceOverflow(f64),

    #[error("marginal likelihood underflow for person {person}; all quadrature terms are -inf")]
    Underflow { person: usize },

    #[error("Gauss-Hermite node computation did not converge for Q = {0}")]
    Quadrature(usize),

    #[error("non-finite value at coordinate {coordinate} ({name})")]
    NonFinite { coordinate: usize, name: String },

    #[error("singular information for {label} (condition number {condition:.3e})")]
    SingularInformation { label: String, condition: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures caused by the numerics rather than by the caller.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::VarianceOverflow(_)
                | Error::Underflow { .. }
                | Error::Quadrature(_)
                | Error::NonFinite { .. }
                | Error::SingularInformation { .. }
        )
    }
}
