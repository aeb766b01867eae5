use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Config,
    Numerical,
    Convergence,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical consistency violated: {0}")]
    NumericalConsistency(String),

    #[error("no solution: {reason}; feasible region: {feasible}")]
    NoSolution { reason: String, feasible: String },

    #[error("fit did not converge after {iterations} iterations (rss {rss:.6e})")]
    FitFailure {
        iterations: usize,
        rss: f64,
        residuals: Vec<f64>,
    },

    #[error("optimizer did not converge after {iterations} iterations (best objective {best_objective:.6e})")]
    Convergence {
        iterations: usize,
        best_objective: f64,
        best_params: Vec<f64>,
        objective_trace: Vec<f64>,
    },

    #[error("insufficient statistics: {0}")]
    InsufficientStatistics(String),

    #[error("wavelength {lambda_um} um outside validity range [{min_um}, {max_um}] um of {material}")]
    OutOfRange {
        material: String,
        lambda_um: f64,
        min_um: f64,
        max_um: f64,
    },

    #[error("degenerate phase matching: momentum mismatch is zero, poling period is infinite")]
    DegeneratePhaseMatching,

    #[error("unusable compensator material: {0}")]
    UnusableMaterial(String),

    #[error("grid resolution: {0}")]
    Resolution(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidInput(_) | Error::OutOfRange { .. } => ErrorKind::Input,
            Error::Config(_) | Error::Schema { .. } | Error::Io(_) => ErrorKind::Config,
            Error::FitFailure { .. } | Error::Convergence { .. } => ErrorKind::Convergence,
            Error::NumericalConsistency(_)
            | Error::NoSolution { .. }
            | Error::InsufficientStatistics(_)
            | Error::DegeneratePhaseMatching
            | Error::UnusableMaterial(_)
            | Error::Resolution(_) => ErrorKind::Numerical,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
