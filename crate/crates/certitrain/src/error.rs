use thiserror::Error;

/// Unified error type for the whole engine.
///
/// `Config` and `Data` cover everything wrong with user-supplied files and
/// settings; the remaining variants are contract violations or runtime
/// failures surfaced by the numeric code.
#[derive(Debug, Error)]
pub enum CertError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("moment state is undefined before the first update (t = 0)")]
    MomentsUndefined,

    #[error("adversarial point leaves the eps-ball: |delta|_inf = {norm}, eps = {eps}")]
    BallViolation { norm: f64, eps: f64 },

    #[error("non-finite {quantity} at step {step}")]
    NonFinite { quantity: &'static str, step: u64 },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CertError>;
