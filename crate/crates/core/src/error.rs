use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("unsupported schema version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },

    #[error("grid too small: {body} lies outside the occupancy grid bounds")]
    GridTooSmall { body: String },

    #[error("reachability map was built for chain {expected}, but the current chain hashes to {found}")]
    ChainMismatch { expected: String, found: String },

    #[error("malformed map file: {0}")]
    MalformedMap(String),

    #[error("the objective uses the reachability term but no map was given; run `reachtrack build-map` first or disable the term")]
    MissingMap,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable class used by the command-line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidChain(_) => "invalid-chain",
            Error::InvalidParams(_) => "invalid-params",
            Error::Schema { .. } => "schema",
            Error::SchemaVersion { .. } => "schema-version",
            Error::GridTooSmall { .. } => "grid-too-small",
            Error::ChainMismatch { .. } => "chain-mismatch",
            Error::MalformedMap(_) => "malformed-map",
            Error::MissingMap => "missing-map",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
