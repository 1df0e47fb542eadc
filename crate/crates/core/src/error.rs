use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("event {event_id}: {reason}")]
    InvalidEvent { event_id: String, reason: String },

    #[error("duplicate event id {0}")]
    DuplicateEvent(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("{what} out of range: {value}")]
    OutOfRange { what: String, value: String },

    #[error("index {0} repeated in sequence")]
    RepeatedIndex(usize),

    #[error("symmetric eigensolver did not converge after {sweeps} sweeps on matrix {matrix}")]
    EigenNoConvergence { sweeps: usize, matrix: String },

    #[error("infeasible motif: chain of {motif} posts needs more than {nodes} nodes")]
    InfeasibleMotif { motif: usize, nodes: usize },

    #[error("cannot split {events} events into {folds} folds")]
    TooFewEvents { events: usize, folds: usize },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("AUC is undefined when only one class is present")]
    SingleClassAuc,

    #[error("paired differences have zero variance")]
    DegenerateVariance,

    #[error("config {path}: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(event_id: &str, reason: impl Into<String>) -> Self {
        Error::InvalidEvent {
            event_id: event_id.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn out_of_range(what: impl Into<String>, value: impl std::fmt::Display) -> Self {
        Error::OutOfRange {
            what: what.into(),
            value: value.to_string(),
        }
    }
}
