use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the whole pipeline.
///
/// Every variant maps to a stable category string so the CLI can emit
/// one-line machine-parsable failures (`error[<category>]: <message>`).
#[derive(Debug, Error)]
pub enum HdeError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("missing or stale dependency artifact: {0}")]
    Dependency(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HdeError {
    /// Stable one-word category used in CLI error lines and exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            HdeError::Dimension { .. } => "dimension",
            HdeError::Contract(_) => "contract",
            HdeError::Config(_) => "config",
            HdeError::Ingest(_) => "ingest",
            HdeError::Dependency(_) => "dependency",
            HdeError::Numeric(_) => "numeric",
            HdeError::Parse(_) => "parse",
            HdeError::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HdeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HdeError>;
