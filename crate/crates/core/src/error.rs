use thiserror::Error;

/// Pipeline stage that raised an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    DatasetIo,
    Regression,
    Correlation,
    NullThreshold,
    Variance,
    Simulation,
    Cli,
}

impl std::fmt::Display for Module {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Module::DatasetIo => "dataset_io",
            Module::Regression => "regression",
            Module::Correlation => "correlation",
            Module::NullThreshold => "null_threshold",
            Module::Variance => "variance",
            Module::Simulation => "simulation",
            Module::Cli => "cli",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum TmoError {
    #[error("[{module}] {message}")]
    InvalidInput { module: Module, message: String },

    #[error("[dataset_io] malformed file {path}: {message}")]
    Malformed { path: String, message: String },

    #[error("[dataset_io] column `{0}` not found in header")]
    MissingColumn(String),

    #[error("[dataset_io] only {0} complete units remain (need at least 3)")]
    TooFewUnits(usize),

    #[error("[dataset_io] only {0} auxiliary outcomes remain (need at least 2)")]
    TooFewOutcomes(usize),

    #[error("[regression] design matrix is rank deficient; offending columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("[{module}] numerical failure: {message}")]
    Numerical { module: Module, message: String },

    #[error("[null_threshold] degenerate statistic distribution: {0}")]
    Degenerate(String),

    #[error("[null_threshold] optimizer hit search bound v = {0:e}")]
    SearchBound(f64),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TmoError {
    pub fn invalid(module: Module, message: impl Into<String>) -> Self {
        TmoError::InvalidInput { module, message: message.into() }
    }

    pub fn numerical(module: Module, message: impl Into<String>) -> Self {
        TmoError::Numerical { module, message: message.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        TmoError::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for data errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            TmoError::RankDeficient { .. }
            | TmoError::Numerical { .. }
            | TmoError::Degenerate(_)
            | TmoError::SearchBound(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, TmoError>;
