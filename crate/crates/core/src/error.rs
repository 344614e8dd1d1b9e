use thiserror::Error;

use crate::bo::Session;


pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation diverged at sample {sample}: |value| = {value:e}")]
    Diverged { sample: usize, value: f64 },

    #[error("non-invertible instantaneous stiffness ({stiffness} N/mm)")]
    NonInvertibleStiffness { stiffness: f64 },

    #[error("reference series has zero range")]
    ZeroRange,

    #[error("optimizer did not improve on its best initial sample")]
    NoImprovement,

    #[error("Newton iteration did not converge after {iterations} iterations (gradient norm {gradient:e})")]
    NotConverged { iterations: usize, gradient: f64 },

    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    NonPsdKernel { jitter: f64 },

    #[error("no feasible point in stratum after {attempts} resamples")]
    InfeasibleStratum { attempts: usize },

    #[error("feasible candidate set is empty")]
    EmptyFeasibleSet,

    #[error("aggregate posterior is flat (score range {range:e})")]
    FlatPosterior { range: f64 },

    #[error("session is not in the {expected} state")]
    SessionState { expected: &'static str },

    #[error("feedback for trial {trial_index} conflicts with the recorded label")]
    FeedbackConflict { trial_index: usize },

    #[error("feedback source failed at trial {trial_index}: {message}")]
    Oracle {
        trial_index: usize,
        message: String,
        partial: Box<Session>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
