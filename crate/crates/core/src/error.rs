use thiserror::Error;

/// Errors raised while loading data, fitting models or running simulations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("rank-deficient design: column {index}{} is linearly dependent on earlier columns", .column.as_deref().map(|c| format!(" ('{c}')")).unwrap_or_default())]
    RankDeficient { index: usize, column: Option<String> },

    #[error("binary response has only one class (all values are {0})")]
    SingleClass(u8),

    #[error("singular matrix in {context} (condition number {condition:.3e})")]
    Singular { context: String, condition: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("simulation failed: {0}")]
    Simulation(String),
}

impl Error {
    /// Attaches a column name to a rank-deficiency error raised on an unnamed matrix.
    pub fn with_column_names(self, names: &[String]) -> Self {
        match self {
            Error::RankDeficient {
                index,
                column: None,
            } => Error::RankDeficient {
                index,
                column: names.get(index).cloned(),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
