use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported sampling regime: {0}")]
    OversampleRequired(String),
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),
    #[error("singular evaluation: {0}")]
    Singular(String),
    #[error("root finding failed: {0}")]
    RootFinding(String),
    #[error("theta roots overlap: {0}")]
    ClusterOverlap(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("contour violates analyticity: {0}")]
    Contour(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    /// True for errors caused by user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::DimensionMismatch(_) | Error::OversampleRequired(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
