use std::io;

use thiserror::Error;

/// Errors produced anywhere in the benchmarking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("schedule generation failed at IO {index}: {reason}")]
    Schedule { index: u64, reason: String },

    #[error("device IO failed at request {index}: {source}")]
    DeviceIo {
        index: u64,
        #[source]
        source: io::Error,
    },

    #[error("device request rejected: {0}")]
    BadRequest(String),

    #[error("operation not supported by this backend: {0}")]
    Unsupported(&'static str),

    #[error("snapshot mismatch: {0}")]
    Snapshot(String),

    #[error("summary would be empty: io_ignore {io_ignore} >= {records} records")]
    EmptySummary { io_ignore: u64, records: u64 },

    #[error("experiment {0} does not fit on the device")]
    Capacity(String),

    #[error("artifact schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("state enforcement aborted at {:.2}% coverage: {source}", coverage * 100.0)]
    FormatAborted {
        coverage: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown micro-benchmark: {0}")]
    UnknownMicro(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the device itself (as opposed to bad input).
    pub fn is_device_error(&self) -> bool {
        match self {
            Error::DeviceIo { .. } => true,
            Error::FormatAborted { source, .. } => source.is_device_error(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
