use thiserror::Error;

/// Errors raised by estimation, testing, simulation and data handling.
///
/// Variant names double as the diagnostic tags printed by the CLI, so a
/// caller can grep for `RankError` or `SingularityError` in stderr.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum IvError {
    #[error("DimensionError: {0}")]
    Dimension(String),
    #[error("RankError: {0}")]
    Rank(String),
    #[error("NonFiniteError: {0}")]
    NonFinite(String),
    #[error("SingularityError: {0}")]
    Singularity(String),
    #[error("ConvergenceError: {0}")]
    Convergence(String),
    #[error("PartitionError: {0}")]
    Partition(String),
    #[error("UnsupportedError: {0}")]
    Unsupported(String),
    #[error("DomainError: {0}")]
    Domain(String),
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("ParseError: {0}")]
    Parse(String),
    #[error("GapError: {0}")]
    Gap(String),
    #[error("SchemaError: {0}")]
    Schema(String),
    #[error("IoError: {0}")]
    Io(String),
}

impl IvError {
    /// True for failures that originate in the input data rather than in the
    /// numerics (used for the CLI exit-code contract).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            IvError::Dimension(_)
                | IvError::Rank(_)
                | IvError::NonFinite(_)
                | IvError::Parse(_)
                | IvError::Gap(_)
                | IvError::Schema(_)
                | IvError::Io(_)
        )
    }
}

impl From<std::io::Error> for IvError {
    fn from(e: std::io::Error) -> Self {
        IvError::Io(e.to_string())
    }
}

impl From<csv::Error> for IvError {
    fn from(e: csv::Error) -> Self {
        IvError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, IvError>;
