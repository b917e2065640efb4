use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: cannot parse `{cell}` at row {row}, column {col}")]
    Parse {
        path: String,
        row: usize,
        col: usize,
        cell: String,
    },
    #[error("{path}: row {row} has {found} values, expected {expected}")]
    RaggedRows {
        path: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] gpreg::Error),
}

impl CliError {
    /// 2 usage, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use gpreg::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Parse { .. } | CliError::RaggedRows { .. } | CliError::Io { .. } | CliError::Data(_) => 3,
            CliError::Model(e) => match e {
                E::InvalidArgument(_) | E::EmptyWindow => 2,
                E::NonMonotoneGrid { .. }
                | E::TooFewPoints { .. }
                | E::NonFiniteGrid { .. }
                | E::QueryOutOfDomain { .. }
                | E::DimensionMismatch { .. }
                | E::InconsistentGrid(_)
                | E::DegenerateSample { .. }
                | E::DegenerateDenominator => 3,
                _ => 4,
            },
        }
    }

    /// Short machine-readable tag used in the error report.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "usage",
            3 => "data",
            _ => "numerical",
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
