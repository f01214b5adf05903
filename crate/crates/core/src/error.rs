use std::path::PathBuf;

/// Errors produced by the calibration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient matches: need at least {needed}, got {got}")]
    InsufficientMatches { needed: usize, got: usize },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("no calibration hypothesis passed the residual gate")]
    NoConsensus,

    #[error("phantom not coverable: {0}")]
    Coverage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("insufficient fiducials: need at least 2 identified tips, got {0}")]
    InsufficientFiducials(usize),

    #[error("no frame pair overlaps under the initial calibration")]
    NoOverlap,

    #[error("i/o error on {path}: {source}")]
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

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
