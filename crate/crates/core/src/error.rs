use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("network build error at layer {layer}: {reason}")]
    Build { layer: usize, reason: String },

    #[error("selection error: {0}")]
    Selection(String),

    /// AdaBoost could not find any stump better than chance in the first round.
    #[error("empty selection: no stump beats weighted error 0.5")]
    EmptySelection,

    #[error("score error: {0}")]
    Score(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("untrained head")]
    UntrainedHead,

    #[error("training diverged at iteration {iteration}: {reason}")]
    Training { iteration: u64, reason: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("dataset generation error: {0}")]
    Generation(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { path: PathBuf, stored: u32, computed: u32 },

    #[error("eval error: {0}")]
    Eval(String),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn file(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Error::File { path: path.to_path_buf(), source }
    }
}
