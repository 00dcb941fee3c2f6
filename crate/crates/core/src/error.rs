use std::path::PathBuf;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {stage}: expected {expected}, found {found}")]
    DimensionMismatch {
        stage: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("no samples found under {0}")]
    NoSamples(PathBuf),

    #[error("family `{family}` has {count} samples, need at least {required}")]
    TooFewSamples {
        family: String,
        count: usize,
        required: usize,
    },

    #[error("family `{family}` has zero spread of centroid distances")]
    DegenerateFamily { family: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("artifact mismatch in {artifact}: expected `{expected}`, found `{found}`")]
    ArtifactMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True when the failure was caused by the caller's input rather than
    /// by an internal fault. The CLI maps this to exit code 2.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_user_error(),
            Error::NonFiniteLoss { .. } => false,
            Error::Io { source, .. } => matches!(
                source.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
