use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("idx: bad magic bytes {0:02x?}")]
    IdxMagic([u8; 2]),

    #[error("idx: unsupported type code 0x{0:02x}")]
    IdxTypeCode(u8),

    #[error("idx: truncated stream (expected {expected} bytes, got {actual})")]
    IdxTruncated { expected: usize, actual: usize },

    #[error("container: {0}")]
    Container(String),

    #[error("layer {layer}: {detail}")]
    Layer { layer: usize, detail: String },

    #[error("plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("schedule inconsistent with plan: {0}")]
    Schedule(String),

    #[error("config field `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
