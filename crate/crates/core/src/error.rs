use crate::autodiff::AdError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("automatic differentiation failed: {0}")]
    Autodiff(#[from] AdError),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} did not converge after {iterations} iterations (gradient norm {grad_norm:.3e}, last iterate {last:?})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("normalizing matrix is singular (condition number {condition:.3e})")]
    SingularNormalizingMatrix { condition: f64 },

    #[error("positivity violation: propensity {g1} is not strictly inside (0, 1)")]
    Positivity { g1: f64 },

    #[error("treatment arm {arm} has {count} observations, at least {needed} required")]
    InsufficientData { arm: u8, count: usize, needed: usize },

    #[error("targeting stopped after {iterations} iterations without convergence (EIF mean norm {eif_mean_norm:.3e})")]
    TargetingNotConverged { iterations: usize, eif_mean_norm: f64 },

    #[error("epsilon-to-beta map is degenerate (|det| = {det:.3e})")]
    DegenerateMap { det: f64 },

    #[error("log target is not finite at the initial point")]
    ChainInit,

    #[error("{failed} of {reps} replications failed, above the 5% limit")]
    TooManyFailures { failed: usize, reps: usize },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Autodiff(_) => "autodiff",
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::NonConvergence { .. } => "nonconvergence",
            Error::RankDeficient(_) => "rank_deficient",
            Error::SingularNormalizingMatrix { .. } => "singular_m",
            Error::Positivity { .. } => "positivity",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::TargetingNotConverged { .. } => "targeting_not_converged",
            Error::DegenerateMap { .. } => "degenerate_map",
            Error::ChainInit => "chain_init",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::Io(_) => "io",
            Error::Parse(_) => "parse",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
