use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },

    #[error("{op}: incompatible shapes {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("channel range {start}..{} out of bounds for {channels} channels", start + len)]
    ChannelRange {
        start: usize,
        len: usize,
        channels: usize,
    },

    #[error("cannot concatenate an empty list of tensors")]
    EmptyConcat,

    #[error("{channels} channels are not divisible by 2^{depth}")]
    Divisibility { channels: usize, depth: u32 },

    #[error("{0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("depth {depth} exceeds log2 of {size}")]
    DepthTooLarge { size: usize, depth: u32 },

    #[error("adjacency dimensions {left_rows}x{left_cols} and {right_rows}x{right_cols} cannot be composed")]
    AdjacencyDims {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unknown layer kind `{0}`")]
    UnknownKind(String),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("backward requires a single-element loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
