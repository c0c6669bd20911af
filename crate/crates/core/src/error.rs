use std::path::PathBuf;

use thiserror::Error;

use crate::corrector::CorrectorError;
use crate::estimators::EstimatorError;
use crate::fusion::FusionError;
use crate::judge::JudgeError;
use crate::metrics::MetricError;
use crate::types::{SplitError, Violation};

/// Failures reading or writing pipeline files.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Serialize { path: PathBuf, message: String },
}

impl IoError {
    pub fn is_not_found(&self) -> bool {
        matches!(self, IoError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

/// Top-level error for the pipeline and CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("dataset validation failed with {} violation(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<Violation>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn summarize(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Process exit status for this error: 2 validation, 3 missing input,
    /// 4 metric undefined on a single class, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(e) if e.is_not_found() => 3,
            Error::Io(IoError::Parse { .. }) => 2,
            Error::Validation(_) => 2,
            Error::Corrector(CorrectorError::OutOfRange { .. }) => 2,
            Error::Metric(MetricError::SingleClass) => 4,
            Error::Fusion(FusionError::Metric(MetricError::SingleClass)) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
