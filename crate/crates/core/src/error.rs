use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum KinoError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("non-finite scan state at t={t}, c={c}, s={s} (sequence {lane})")]
    ScanNumeric {
        lane: usize,
        t: usize,
        c: usize,
        s: usize,
    },

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Divergence { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KinoError>;

impl KinoError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        KinoError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
