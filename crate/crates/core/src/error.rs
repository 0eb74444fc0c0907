use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error in {file}: {message}")]
    Schema { file: String, message: String },

    #[error("no recipients survive filtering")]
    NoRecipients,

    #[error("insufficient distinct send offsets: {distinct} distinct for {bins} bins")]
    InsufficientOffsets { distinct: usize, bins: usize },

    #[error("bin {bin} out of range for {bin_count} bins")]
    InvalidBin { bin: usize, bin_count: usize },

    #[error("no events in batch")]
    NoEvents,

    #[error("no admissible pairs")]
    NoAdmissiblePairs,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("all observations are censored")]
    AllCensored,

    #[error("mixture unidentified: no censored observations")]
    MixtureUnidentified,

    #[error("bin scheme mismatch: model trained on {expected}, got {actual}")]
    SchemeMismatch { expected: String, actual: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
