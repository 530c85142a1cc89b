use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("prediction {query} has a non-finite class score")]
    NonFiniteScore { query: usize },

    #[error("IoU target {0} outside [0, 1]")]
    TargetOutOfRange(f64),

    #[error("non-finite activation at stage {stage}, query {query}")]
    NonFiniteActivation { stage: usize, query: usize },

    #[error("non-finite loss at epoch {epoch}, step {step} (inputs dumped to {dump:?})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        dump: Option<PathBuf>,
    },

    #[error("computation graph already consumed by a backward pass")]
    GraphConsumed,

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("matches disagree on the ground-truth set ({student} vs {teacher} objects)")]
    GtSetMismatch { student: usize, teacher: usize },

    #[error("snapshot enumeration mismatch: {0}")]
    SnapshotMismatch(String),

    #[error("auxiliary group of {size} queries exceeds num_queries = {limit}")]
    GroupTooLarge { size: usize, limit: usize },

    #[error("rejection budget of {budget} draws exceeded while placing objects")]
    RejectionBudget { budget: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors that signal a broken invariant rather than bad input.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteScore { .. }
                | Error::TargetOutOfRange(_)
                | Error::NonFiniteActivation { .. }
                | Error::NonFiniteLoss { .. }
                | Error::GraphConsumed
                | Error::LayoutMismatch(_)
                | Error::GtSetMismatch { .. }
                | Error::SnapshotMismatch(_)
                | Error::GroupTooLarge { .. }
        )
    }
}
