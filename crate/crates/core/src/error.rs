use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the analysis toolkit.
///
/// Variants are grouped by the exit code the CLI maps them to: input problems
/// (missing or inconsistent files, bad arguments), numerical failures, and
/// schema violations in manifests or reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("{path}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: label {label} at row {row} is outside [0, {label_count})")]
    LabelOutOfRange {
        path: PathBuf,
        row: usize,
        label: u32,
        label_count: u32,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("misaligned pair: {0}")]
    Misaligned(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("labels contain a single class ({0}); at least two are required")]
    SingleClass(u32),

    #[error("missing labels for {0}")]
    MissingLabels(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no decodability score for seemingly deleted concept {0}")]
    MissingScore(usize),

    #[error("accuracy unit mismatch: {0} vs {1} (mix of fractions and percentages)")]
    UnitMismatch(f64, f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::NonFinite(_) | Error::Invariant(_) => 3,
            Error::Schema { .. } => 4,
            _ => 2,
        }
    }
}
