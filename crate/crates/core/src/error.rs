use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid delay distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid stamp: t_start={t_start} must not exceed t_end={t_end}")]
    InvalidStamp { t_start: f64, t_end: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("episode already finished; reset before stepping")]
    EpisodeDone,

    #[error("experience stamps must be monotone: step {step} starts at {t_start}, previous ended at {previous_end}")]
    NonMonotoneStamp {
        step: u64,
        t_start: f64,
        previous_end: f64,
    },

    #[error("feedback times must be monotone: {t_feedback} precedes {previous}")]
    NonMonotoneFeedback { t_feedback: f64, previous: f64 },

    #[error("parameter file: {0}")]
    ParamFile(String),

    #[error("wiring mismatch: {0}")]
    Wiring(String),

    #[error("log: {0}")]
    Log(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
