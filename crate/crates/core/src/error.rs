use std::path::PathBuf;

use thiserror::Error;

/// Row-level ingestion failures. `row` is the 1-based line number in the
/// source file (the header is line 1).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` value {value:?} is not a valid number")]
    UnparsableNumber {
        row: u64,
        column: String,
        value: String,
    },
    #[error("row {row}: repetition_mode {value:?} is neither `sequential` nor `simultaneous`")]
    UnknownMode { row: u64, value: String },
    #[error("row {row}: point (flow={flow}, layer_height={layer_height}) lies outside the parameter bounds")]
    OutOfBounds {
        row: u64,
        flow: f64,
        layer_height: f64,
    },
    #[error("row {row}: device_id {device_id} is not below the fleet size {fleet_size}")]
    UnknownDevice {
        row: u64,
        device_id: usize,
        fleet_size: usize,
    },
    #[error("row {row}: {column} must be strictly positive and finite, got {value}")]
    InvalidWeight { row: u64, column: String, value: f64 },
    #[error("row {row}: malformed record: {message}")]
    Malformed { row: u64, message: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Ingest(#[from] IngestError),

    #[error("no qualifying replicate groups (every group needs at least 2 replicates)")]
    NoQualifyingGroups,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("GP training failed: {0}")]
    Training(String),

    #[error("decision is indeterminate and no fallback strategy was given")]
    Indeterminate,

    #[error("oracle timed out after {seconds} s waiting for device {device_id} at iteration {iteration}")]
    OracleTimeout {
        device_id: usize,
        iteration: usize,
        seconds: f64,
    },

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("{phase} phase: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the campaign phase that produced it.
    pub fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    /// Strips phase tags to reach the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
