use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    ConfigSyntax(String),

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{}: {msg}", path.display())]
    Schema { path: PathBuf, msg: String },

    #[error("unknown suite `{0}` (expected estimators, coherence, oracle or all)")]
    UnknownSuite(String),

    #[error("no run CSVs found under {}", .0.display())]
    NoRuns(PathBuf),

    #[error("all {0} seeds failed")]
    AllSeedsFailed(usize),

    #[error(transparent)]
    Core(#[from] mvpg_core::Error),
}

impl CliError {
    /// Process exit status: 2 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigSyntax(_) | CliError::Config { .. } | CliError::UnknownSuite(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        CliError::Csv {
            path: path.into(),
            source,
        }
    }
}
