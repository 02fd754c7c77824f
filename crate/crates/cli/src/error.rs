use ipw_core::IpwError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("column {0:?} not found in header")]
    MissingColumn(String),

    #[error("row {row}, column {column:?}: cannot parse {value:?} as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: respondent has no value for {column:?}")]
    MissingInRespondent { row: usize, column: String },

    #[error("row {row}: response covariate {column:?} is missing; response covariates must be fully observed")]
    MissingInResponseCovariate { row: usize, column: String },

    #[error("row {row}: response indicator must be 0 or 1, got {value:?}")]
    InvalidIndicator { row: usize, value: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {kind} file: {message}")]
    Malformed { kind: &'static str, message: String },

    #[error(transparent)]
    Core(#[from] IpwError),
}

impl CliError {
    /// Stable machine-readable name of the failure cause.
    pub fn cause(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "Io",
            CliError::Csv(_) => "Csv",
            CliError::MissingColumn(_) => "MissingColumn",
            CliError::NonNumeric { .. } => "NonNumeric",
            CliError::MissingInRespondent { .. } => "MissingInRespondent",
            CliError::MissingInResponseCovariate { .. } => "MissingInResponseCovariate",
            CliError::InvalidIndicator { .. } => "InvalidIndicator",
            CliError::Config(_) => "Config",
            CliError::Malformed { .. } => "Malformed",
            CliError::Core(e) => e.cause(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
