use std::path::PathBuf;

use t2td_numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite loss at step {step} of {stage}")]
    Divergence { stage: &'static str, step: usize },
    #[error("empty generation: max occupancy probability {max_prob:.4} is below threshold {threshold}")]
    EmptyGeneration { max_prob: f64, threshold: f64 },
    #[error("missing prerequisite: {0}")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}

pub(crate) fn format_err(what: &'static str, detail: impl Into<String>) -> CoreError {
    CoreError::Format {
        what,
        detail: detail.into(),
    }
}
