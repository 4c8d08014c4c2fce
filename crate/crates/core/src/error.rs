//! Error type shared across the crate.
//!
//! Contract violations (shape mismatches, wrong-tape handles, non-scalar
//! losses) are programmer errors and panic with a message; everything that
//! can be triggered by data, configuration, or the filesystem surfaces as a
//! variant here.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error at row {row}, column {col}: {msg}")]
    Csv { row: usize, col: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("channel {channel} has near-constant training data (std {std:.3e}); cannot standardize")]
    DegenerateChannel { channel: usize, std: f64 },

    #[error("training diverged: non-finite loss at {context}")]
    Diverged { context: String },

    #[error("{path}: bad magic, not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    BadVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: checksum mismatch, file is corrupt")]
    ChecksumMismatch { path: PathBuf },

    #[error("buffer fingerprint does not match current configuration")]
    FingerprintMismatch,

    #[error("trajectory segment is degenerate (denominator {denom:.3e} below 1e-12); skip this sample")]
    DegenerateSegment { denom: f64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
