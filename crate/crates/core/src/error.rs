use thiserror::Error;

#[derive(Debug, Error)]
pub enum TomoError {
    /// Analytic state expansion lost more trace than allowed at the requested truncation.
    #[error("truncation at dimension {dim} keeps trace {kept:.3e}, below the required {required:.3e}")]
    Truncation { dim: usize, kept: f64, required: f64 },

    /// Fock-basis noise deconvolution needs eta > 1/2; the kernel is unbounded otherwise.
    #[error("quantum efficiency {eta} too low for deconvolution (need eta > 0.5)")]
    EfficiencyTooLow { eta: f64 },

    #[error("index error: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("null-estimator basis is singular beyond ridge repair: {0}")]
    SingularBasis(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("no records for outcome n = {0}")]
    EmptyOutcomeBin(usize),

    #[error("optimizer did not converge after {iters} iterations")]
    NotConverged { iters: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid state specification: {0}")]
    InvalidState(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TomoError>;

impl From<serde_json::Error> for TomoError {
    fn from(e: serde_json::Error) -> Self {
        TomoError::Format(e.to_string())
    }
}

impl From<csv::Error> for TomoError {
    fn from(e: csv::Error) -> Self {
        TomoError::Format(e.to_string())
    }
}

pub(crate) fn check_eta_forward(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(TomoError::InvalidParameter(format!("quantum efficiency must lie in (0, 1], got {eta}")));
    }
    Ok(())
}

pub(crate) fn check_eta_deconvolution(eta: f64) -> Result<()> {
    if eta.is_nan() || eta > 1.0 {
        return Err(TomoError::InvalidParameter(format!("quantum efficiency must lie in (0.5, 1], got {eta}")));
    }
    if eta <= 0.5 {
        return Err(TomoError::EfficiencyTooLow { eta });
    }
    Ok(())
}
