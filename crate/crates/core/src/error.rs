use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed RLE string at byte {offset}: {reason}")]
    RleDecode { offset: usize, reason: String },

    #[error("dimension mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    DimensionMismatch {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },

    #[error("intersection over minimum is undefined for two empty masks")]
    EmptyMasks,

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("embedding dimension mismatch: {0} vs {1}")]
    EmbeddingDimension(usize, usize),

    #[error("embedding has zero norm or non-finite entries")]
    DegenerateEmbedding,

    #[error("missing {what} for frame {frame_id}, object {object_key}")]
    MissingData {
        what: &'static str,
        frame_id: u32,
        object_key: u32,
    },

    #[error("threshold estimation failed: {0}")]
    Estimation(String),

    #[error("frames out of order: frame {next} follows frame {prev}")]
    FrameOrder { prev: u32, next: u32 },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("clustering invariant violated: {0}")]
    Clustering(String),

    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("stage `{stage}` failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad inputs or configuration rather than
    /// a failure while processing valid inputs.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. } | Error::Config(_) | Error::InvalidValue(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
