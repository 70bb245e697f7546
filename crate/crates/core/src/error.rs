use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FarsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FarsError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("missing or non-numeric value at row {row}, column {column}: {value:?}")]
    MissingValue {
        row: usize,
        column: usize,
        value: String,
    },

    #[error("column {0} is constant and cannot be standardized")]
    ConstantColumn(String),

    #[error("invalid factor structure: {0}")]
    Structure(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<FarsError>,
    },
}

impl FarsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FarsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user input (configuration, files, parameter
    /// domains) rather than from a numerical failure inside a stage.
    pub fn is_validation(&self) -> bool {
        match self {
            FarsError::Io { .. }
            | FarsError::Format(_)
            | FarsError::MissingValue { .. }
            | FarsError::ConstantColumn(_)
            | FarsError::Structure(_)
            | FarsError::Parameter(_)
            | FarsError::Config(_) => true,
            FarsError::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
