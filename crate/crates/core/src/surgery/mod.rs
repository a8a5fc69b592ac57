//! Row surgery on safetensors checkpoints.
//!
//! A safetensors file is an 8-byte little-endian header length `N`, `N`
//! bytes of JSON describing each tensor, then the raw tensor bytes. Tensors
//! are treated as opaque fixed-width byte blocks; no element is ever decoded.

mod header;
mod prune;
mod verify;

use std::path::PathBuf;

pub use header::{parse_header, read_tensor_index, write_header, Dtype, TensorIndex, TensorMeta};
pub use prune::{
    prune_checkpoint, prune_checkpoint_rows, slice_rows, RowMap, SlicedTensor, SurgeryOptions, SurgeryReport,
    PLAN_DIGEST_KEY, SOURCE_DIGEST_KEY, TOOL_VERSION_KEY,
};
pub use verify::{verify_checkpoint, verify_checkpoint_rows, Mismatch, VerifyResult};

#[derive(Debug, thiserror::Error)]
pub enum SurgeryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("file of {len} bytes is too short for a safetensors header")]
    TooShort { len: u64 },
    #[error("header length {declared} exceeds the {available} bytes after the length prefix")]
    HeaderTooLarge { declared: u64, available: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {0:?} appears twice in the header")]
    DuplicateTensor(String),
    #[error("tensor {name:?}: unknown dtype {dtype:?}")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor {name:?}: offsets span {actual} bytes but dtype and shape need {expected}")]
    ShapeMismatch { name: String, expected: u64, actual: u64 },
    #[error("tensor {name:?}: data range ends at {end}, beyond the {data_len}-byte data region")]
    OutOfBounds { name: String, end: u64, data_len: u64 },
    #[error("tensors {first:?} and {second:?} overlap")]
    Overlap { first: String, second: String },
    #[error("tensor {0:?} not found in checkpoint")]
    MissingTensor(String),
    #[error("tensor {0:?} listed more than once")]
    DuplicateName(String),
    #[error("tensor {0:?} has no vocabulary axis (scalar)")]
    Scalar(String),
    #[error("tensor {name:?}: vocabulary axis has {rows} rows, plan expects {v_old}")]
    VocabAxisMismatch { name: String, rows: u64, v_old: u64 },
    #[error("row id {id} out of range for {rows} rows")]
    RowOutOfRange { id: u64, rows: u64 },
    #[error("{path}: not a readable safetensors file: {reason}")]
    Unparseable { path: PathBuf, reason: String },
}

impl SurgeryError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SurgeryError {
        let path = path.into();
        move |source| SurgeryError::Io { path, source }
    }
}
