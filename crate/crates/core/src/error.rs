use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate vector at row {row} (norm {norm:e} below eps)")]
    DegenerateVector { row: usize, norm: f64 },
    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("energy needs at least 2 neurons, got {0}")]
    TooFewNeurons(usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("data generation failed: {0}")]
    Generation(String),
    #[error("format error at line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("checkpoint header field `{field}`: {detail}")]
    Checkpoint { field: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
