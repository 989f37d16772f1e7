use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scalar kernel was evaluated outside its domain.
    #[error("domain error in {function}: {detail}")]
    Domain {
        function: &'static str,
        detail: String,
    },

    /// A partition (or label vector) violated its structural invariants.
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    /// Model, prior or algorithm parameters were out of range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The hit-miss likelihood is undefined for the supplied distortion rate.
    #[error("degenerate likelihood for attribute {attribute}: beta = {beta} (must lie in (0, 1))")]
    DegenerateLikelihood { attribute: usize, beta: f64 },

    /// A record file could not be ingested.
    #[error("{path}: row {row}, column {column}: {message}")]
    Ingestion {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },

    /// Ingestion failure not tied to a single cell.
    #[error("{path}: {message}")]
    Input { path: String, message: String },

    /// Inference produced a non-finite quantity.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
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

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(function: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            function,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
