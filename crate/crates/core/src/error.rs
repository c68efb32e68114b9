use std::path::PathBuf;

/// Errors raised anywhere in the change-detection toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("{dim} = {size} is not divisible by the subsampling factor {factor}")]
    NotDivisible {
        dim: &'static str,
        size: usize,
        factor: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate histogram: energy map is constant")]
    DegenerateHistogram,

    #[error("degenerate reference map: need at least one changed and one unchanged pixel")]
    DegenerateReference,

    #[error("rank-deficient endmember selection at k = {k}; try a smaller number of endmembers")]
    RankDeficient { k: usize },

    #[error("stale tape: recorded at parameter version {tape}, network is at version {current}")]
    StaleTape { tape: u64, current: u64 },

    #[error("layer {layer} ({kind}): {message}")]
    Layer {
        layer: usize,
        kind: &'static str,
        message: String,
    },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
