use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree along a named axis.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got rank {got}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} holds {expected} elements but data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("degenerate embedding: norm {norm:e} is below 1e-12")]
    DegenerateEmbedding { norm: f64 },
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
    #[error("{what} = {value} is outside {range}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown layer group {token:?}; valid presets: {presets}")]
    UnknownGroup { token: String, presets: String },
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("identity {0} has no gallery entry")]
    MissingIdentity(u32),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
