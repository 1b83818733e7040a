use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum TessError {
    #[error("insufficient length: need at least {required} samples, got {actual}")]
    InsufficientLength { required: usize, actual: usize },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("threshold fitting failed: {0}")]
    ThresholdFit(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("parse error at line {line}: {reason} ({content:?})")]
    ResponseParse {
        line: usize,
        reason: String,
        content: String,
    },

    #[error("backend transport failure after {attempts} attempts: {reason}")]
    Transport { attempts: u32, reason: String },

    #[error("mode unsupported: {0}")]
    ModeUnsupported(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<TessError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TessError>;
