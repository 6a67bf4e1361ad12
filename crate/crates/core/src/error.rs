use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("conditioning sequence of length {len} exceeds the model limit {max}")]
    ConditioningTooLong { len: usize, max: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no training images were predicted as class {0}; cannot distill its tokens")]
    EmptyClassSubset(usize),

    #[error("{phase} diverged at iteration {iteration} (loss = {loss})")]
    Diverged {
        phase: &'static str,
        iteration: usize,
        loss: f64,
    },

    #[error("invalid sampler step: {0}")]
    Step(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("classifier: {0}")]
    Classifier(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
