use std::path::PathBuf;

use thiserror::Error;

/// Sample moments of daily log returns, carried by calibration failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawMoments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub count: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("VG drift correction undefined: 1 - theta*nu - sigma^2*nu/2 = {arg} is not positive")]
    OmegaUndefined { arg: f64 },

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("calibration failed: {reason} (moments: {moments:?})")]
    CalibrationFailed { reason: String, moments: RawMoments },

    #[error("out of history: index {t} is earlier than horizon {k}")]
    OutOfHistory { t: usize, k: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("index out of range: {0}")]
    Range(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("action {0} is not one of -1, 0, 1")]
    Domain(i8),

    #[error("equity blow-up: return {value} at index {index} is <= -1")]
    BlowUp { index: usize, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse error classes, used by the command line front end for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter(_)
            | Error::OmegaUndefined { .. }
            | Error::Config(_)
            | Error::Domain(_) => ErrorClass::Config,
            Error::InsufficientData { .. }
            | Error::CalibrationFailed { .. }
            | Error::OutOfHistory { .. }
            | Error::Data(_)
            | Error::Alignment(_)
            | Error::Parse { .. }
            | Error::Format(_)
            | Error::Csv(_) => ErrorClass::Data,
            Error::Shape { .. }
            | Error::Range(_)
            | Error::Contract(_)
            | Error::BlowUp { .. }
            | Error::Io(_) => ErrorClass::Runtime,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
