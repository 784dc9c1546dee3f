use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("circulant preconditioner is singular (min |spectrum| = {min_abs:e}); increase the regularizer")]
    SingularPreconditioner { min_abs: f64 },

    #[error("iteration diverged: {0}")]
    Divergence(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("operator is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("SNR is undefined when sigma = 0")]
    UndefinedSnr,

    #[error("degenerate common line: viewing axes are parallel")]
    DegeneratePair,

    #[error("invalid eigenvalue {0}: must be non-negative")]
    InvalidEigenvalue(f64),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Short machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::Dimension(_) => "dimension",
            Error::SingularPreconditioner { .. } => "singular-preconditioner",
            Error::Divergence(_) => "divergence",
            Error::Resource(_) => "resource",
            Error::NotPositiveDefinite(_) => "not-positive-definite",
            Error::UndefinedSnr => "undefined-snr",
            Error::DegeneratePair => "degenerate-pair",
            Error::InvalidEigenvalue(_) => "invalid-eigenvalue",
            Error::CorruptFile { .. } => "corrupt-file",
            Error::MissingInput(_) => "missing-input",
            Error::NonFinite(_) => "non-finite",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) | Error::Dimension(_) => 2,
            Error::MissingInput(_) | Error::Io { .. } | Error::Json { .. } => 3,
            Error::CorruptFile { .. } => 4,
            Error::Resource(_) => 5,
            Error::SingularPreconditioner { .. } | Error::NotPositiveDefinite(_) => 6,
            Error::Divergence(_) | Error::NonFinite(_) => 7,
            Error::UndefinedSnr | Error::DegeneratePair | Error::InvalidEigenvalue(_) => 8,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
