use std::io;
use std::path::PathBuf;

use skul_core::{AdjustError, DumpError, GeometryError, KsdError, ModelError, StatsError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{}: {source}", path.display())]
    Dump {
        path: PathBuf,
        #[source]
        source: DumpError,
    },
    #[error("{context}: {source}")]
    Stats {
        context: String,
        #[source]
        source: StatsError,
    },
    #[error(transparent)]
    Adjust(#[from] AdjustError),
    #[error("layer {layer}: {source}")]
    Ksd {
        layer: usize,
        #[source]
        source: KsdError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{context}: {source}")]
    Geometry {
        context: String,
        #[source]
        source: GeometryError,
    },
    #[error("{0}")]
    Anomalies(String),
}

impl CliError {
    /// Process exit status; documented in the README.
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io { .. } | CliError::MissingInput(_) => 4,
            CliError::Dump { .. } => 5,
            CliError::Stats { .. } => 6,
            CliError::Adjust(_) => 7,
            CliError::Ksd {
                source: KsdError::NoGap { .. },
                ..
            } => 9,
            CliError::Ksd { .. } => 8,
            CliError::Model(_) => 10,
            CliError::Geometry { .. } => 11,
            CliError::Anomalies(_) => 12,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dump(path: impl Into<PathBuf>, source: DumpError) -> Self {
        CliError::Dump {
            path: path.into(),
            source,
        }
    }

    pub fn stats(context: impl Into<String>, source: StatsError) -> Self {
        // a dump error surfacing through the fit is a format problem
        match source {
            StatsError::Dump(e) => CliError::Dump {
                path: PathBuf::from(context.into()),
                source: e,
            },
            source => CliError::Stats {
                context: context.into(),
                source,
            },
        }
    }

    pub fn geometry(context: impl Into<String>, source: GeometryError) -> Self {
        match source {
            GeometryError::Dump(e) => CliError::Dump {
                path: PathBuf::from(context.into()),
                source: e,
            },
            source => CliError::Geometry {
                context: context.into(),
                source,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
