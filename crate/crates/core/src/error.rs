use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape in {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("cluster {cluster} of {k} is empty; re-run with a different seed or a smaller k")]
    EmptyCluster { cluster: usize, k: usize },

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("batch-norm statistics for {0} are not calibrated; run calibration on its subset first")]
    CalibrationRequired(String),

    #[error("forward cache is stale: {0}")]
    StaleCache(&'static str),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("batch drawn from {got} but target {target} trains on {expected}")]
    DatasetMismatch {
        target: String,
        expected: String,
        got: String,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("checkpoint checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },

    #[error("missing artifact {artifact}; run `{stage}` first")]
    MissingArtifact { artifact: String, stage: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        detail: detail.into(),
    }
}
