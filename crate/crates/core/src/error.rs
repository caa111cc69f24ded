use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point is behind the camera or too close to the image plane (depth {depth:e})")]
    BehindCamera { depth: f64 },

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("parallax of {angle_deg:.4} degrees is below the 1 degree minimum")]
    LowParallax { angle_deg: f64 },

    #[error("cheirality violated: triangulated point has depth {depth:e} in view {view}")]
    Cheirality { view: usize, depth: f64 },

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("no residual carries any weight; the normal equations are empty")]
    NoConstraints,

    #[error("system is rank deficient even after damping escalation to {damping:e}")]
    RankDeficient { damping: f64 },

    #[error("initialization failed: could not register images {unregistered:?}")]
    InitializationFailed { unregistered: Vec<usize> },

    #[error("optimisation diverged at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        snapshot: Option<Box<crate::train::TrainState>>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },
}

/// Broad failure class, used to pick a process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Image { .. }
            | Error::InvalidArgument(_)
            | Error::InsufficientData { .. } => ErrorClass::Data,
            _ => ErrorClass::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
