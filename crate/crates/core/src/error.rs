use thiserror::Error;

/// Failures raised by fitting, variance estimation and simulation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum IpwError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("response indicator is constant ({respondents} of {n} responded); the logistic MLE does not exist")]
    DegenerateResponse { respondents: usize, n: usize },

    #[error("response design matrix is rank deficient")]
    RankDeficientDesign,

    #[error("information matrix is singular")]
    SingularInformation,

    #[error("weighted gram matrix of respondents is singular")]
    SingularGram,

    #[error("logistic fit did not converge after {iterations} iterations (score max-norm {gradient_norm:.3e}, coefficient norm {coef_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        coef_norm: f64,
    },

    #[error("linearized variance requested for externally supplied probabilities; the correction assumes they were estimated from the logistic score equation")]
    KnownProbabilityMisuse,

    #[error("invalid probability {value} at row {row}")]
    InvalidProbability { row: usize, value: f64 },

    #[error("association design contains missing values for row {0}")]
    MissingDesign(usize),

    #[error("correlation target infeasible: {0}")]
    NoSolution(String),

    #[error("bisection bracket [{lo}, {hi}] does not contain the target response rate")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("reference variance is zero")]
    ZeroReference,

    #[error("unknown scenario label {0:?}")]
    UnknownScenario(String),
}

impl IpwError {
    /// Stable machine-readable name of the failure cause.
    pub fn cause(&self) -> &'static str {
        match self {
            IpwError::DimensionMismatch(_) => "DimensionMismatch",
            IpwError::InvalidDataset(_) => "InvalidDataset",
            IpwError::DegenerateResponse { .. } => "DegenerateResponse",
            IpwError::RankDeficientDesign => "RankDeficientDesign",
            IpwError::SingularInformation => "SingularInformation",
            IpwError::SingularGram => "SingularGram",
            IpwError::NonConvergence { .. } => "NonConvergence",
            IpwError::KnownProbabilityMisuse => "KnownProbabilityMisuse",
            IpwError::InvalidProbability { .. } => "InvalidProbability",
            IpwError::MissingDesign(_) => "MissingDesign",
            IpwError::NoSolution(_) => "NoSolution",
            IpwError::BracketFailure { .. } => "BracketFailure",
            IpwError::ZeroReference => "ZeroReference",
            IpwError::UnknownScenario(_) => "UnknownScenario",
        }
    }
}

pub type Result<T> = std::result::Result<T, IpwError>;
