use alloc::string::String;

/// Errors produced by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("empty neighborhood (k = 0)")]
    EmptyNeighborhood,

    #[error("batch norm needs at least 2 rows in train mode, got {0}")]
    BatchSize(usize),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("expected a scalar loss, got shape {0:?}")]
    NotScalar(alloc::vec::Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("count error: requested {requested}, available {available}")]
    Count { requested: usize, available: usize },

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("degenerate quaternion (norm {0:e})")]
    DegenerateQuaternion(f64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sample generation failed: {0}")]
    Generation(String),

    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::Dimension { op, detail })
}
