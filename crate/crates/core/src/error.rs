use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// A caller broke an API precondition (wrong tape state, missing cache entry, ...).
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("malformed checkpoint at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("planted model self-check failed: {0}")]
    Construction(String),

    #[error(
        "numerical abort at step {step} ({desideratum}): loss became non-finite; \
         last finite loss {last_finite_loss:?} at step {last_finite_step:?}"
    )]
    NumericalAbort {
        step: usize,
        desideratum: String,
        last_finite_loss: Option<f32>,
        last_finite_step: Option<usize>,
    },

    #[error("training failed: held-out accuracy {accuracy:.3} after {steps} steps (need >= {floor:.2})")]
    TrainingFailure {
        accuracy: f32,
        steps: usize,
        floor: f32,
        curve: Vec<crate::tasks::CurvePoint>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
