use std::path::PathBuf;

/// Failure classes of a command, each with a fixed exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, flags or input files. Exit code 1.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A report broke one of its invariants. Exit code 2.
    #[error("invariant violation: {0}")]
    Invariant(String),
    /// Any other failure while running. Exit code 1.
    #[error("{0}")]
    Run(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed input text, with the 1-based line of the problem.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invariant(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<i2o_core::Error> for CliError {
    fn from(e: i2o_core::Error) -> Self {
        use i2o_core::Error as E;
        match e {
            E::InvariantViolation(m) => CliError::Invariant(m),
            E::InvalidParameter(_)
            | E::InvalidProblem(_)
            | E::DimensionMismatch { .. }
            | E::NotSquare { .. }
            | E::NonFinite(_)
            | E::Hypothesis(_) => CliError::Config(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
