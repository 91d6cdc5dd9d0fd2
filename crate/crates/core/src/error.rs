use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("latent incompatible: {0}")]
    Compatibility(String),

    #[error("corpus misaligned: {0}")]
    Alignment(String),

    #[error("training diverged at step {step}: {components}")]
    Divergence { step: u64, components: String },

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable category tag, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::Length { .. } => "length",
            Error::Compatibility(_) => "compatibility",
            Error::Alignment(_) => "alignment",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
