use std::path::PathBuf;

/// Errors raised by the estimator, the simulator and the dataset readers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is not a rotation (orthogonality error {orthogonality:.3e}, det {det:.6})")]
    InvalidRotation { orthogonality: f64, det: f64 },

    #[error("timestamps are not strictly increasing at index {index} (t = {t})")]
    NonMonotoneTimestamps { index: usize, t: f64 },

    #[error("no IMU samples available for propagation")]
    NoImuData,

    #[error("point {index} has timestamp {t} outside the scan interval [{start}, {end}]")]
    PointOutsideScan {
        index: usize,
        t: f64,
        start: f64,
        end: f64,
    },

    #[error("time {t} outside trajectory range [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("pixel ({u:.3}, {v:.3}) outside image of size {width}x{height}")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("point is behind the camera (z = {z:.4})")]
    BehindCamera { z: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("linear system is not positive definite")]
    NotPositiveDefinite,
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure categories, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } | Error::MissingFile(_) => ErrorCategory::Io,
            Error::Config(_) => ErrorCategory::Config,
            Error::NonMonotoneTimestamps { .. }
            | Error::Format { .. }
            | Error::PointOutsideScan { .. }
            | Error::TimeOutOfRange { .. }
            | Error::NoImuData => ErrorCategory::Data,
            Error::InvalidRotation { .. }
            | Error::PixelOutOfBounds { .. }
            | Error::BehindCamera { .. }
            | Error::NotPositiveDefinite => ErrorCategory::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
