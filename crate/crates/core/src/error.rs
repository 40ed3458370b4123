use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient correspondences: found {found}, need at least {required}")]
    InsufficientCorrespondences { found: usize, required: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing upstream stage output {path}: {hint}")]
    StageOrder { path: PathBuf, hint: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedFile { path: path.into(), reason: reason.into() }
    }

    /// Process exit code: 1 validation, 2 I/O, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::MalformedFile { .. } | Error::StageOrder { .. } | Error::Csv(_) => 2,
            Error::DegenerateGeometry(_) | Error::InsufficientCorrespondences { .. } | Error::Numeric(_) => 3,
            Error::Calibration(_)
            | Error::Validation(_)
            | Error::Shape(_)
            | Error::Config(_)
            | Error::Json(_) => 1,
        }
    }
}
