use std::io;

use thiserror::Error;

/// Everything that can go wrong while loading data or running an estimator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, field '{field}': {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("no path between site '{from}' and site '{to}'")]
    Unreachable { from: String, to: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("hierarchy {0} has non-equipped links but no equipped observation")]
    UncoverableHierarchy(u32),
    #[error("missing observations for links: {}", .0.join(", "))]
    MissingLinks(Vec<String>),
    #[error("all site pairs are unreachable; empirical variogram is empty")]
    EmptyVariogram,
    #[error("variogram fit failed: {message} (best rss so far {best_rss})")]
    Fit { message: String, best_rss: f64 },
    #[error("only {found} neighbors within range {range_km} km, need {required}")]
    InsufficientNeighbors {
        found: usize,
        required: usize,
        range_km: f64,
    },
    #[error("singular kriging system (condition estimate {condition:e})")]
    SingularSystem { condition: f64 },
    #[error("field covers {covered:.4} of network length, threshold {threshold}")]
    IncompleteField { covered: f64, threshold: f64 },
    #[error("series are misaligned: {0}")]
    Alignment(String),
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("degenerate test: {0}")]
    DegenerateTest(String),
    #[error("covariance matrix is not positive definite after jitter; try a larger nugget")]
    NotPositiveDefinite,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse grouping of errors, used for reporting and process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    NotApplicable,
    Numeric,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Argument(_)
            | Error::MissingLinks(_)
            | Error::Alignment(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Validation,
            Error::Unreachable { .. }
            | Error::InsufficientData(_)
            | Error::UncoverableHierarchy(_)
            | Error::EmptyVariogram
            | Error::InsufficientNeighbors { .. }
            | Error::IncompleteField { .. } => ErrorClass::NotApplicable,
            Error::Fit { .. }
            | Error::SingularSystem { .. }
            | Error::RankDeficient(_)
            | Error::DegenerateTest(_)
            | Error::NotPositiveDefinite => ErrorClass::Numeric,
            Error::Io(_) => ErrorClass::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
