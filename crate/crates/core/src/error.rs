use thiserror::Error;

pub type Result<T> = std::result::Result<T, DaanError>;

#[derive(Debug, Error)]
pub enum DaanError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("no valid negative for anchor {anchor} (batch of {batch} shares its label)")]
    Mining { anchor: usize, batch: usize },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("feature file format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("degenerate parameters: {0}")]
    DegenerateParameters(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Divergence { epoch: usize, batch: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
