use std::path::PathBuf;

use thiserror::Error;

use crate::graph::{GraphViolation, VertexId};
use crate::tensor::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rank {0} exceeds the maximum of 8")]
    RankTooLarge(usize),
    #[error("expected dtype {expected:?}, found {found:?}")]
    DTypeMismatch { expected: DType, found: DType },

    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype code {0}")]
    UnsupportedDType(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("csv: {0}")]
    Csv(String),

    #[error("non-finite value at flat index {0}")]
    NonFiniteInput(usize),
    #[error("invalid quantization scale {0}")]
    InvalidScale(f32),

    #[error("weight {value} out of range at index {index}")]
    WeightOutOfRange { value: i32, index: usize },
    #[error("input {value} out of range at index {index}")]
    InputOutOfRange { value: i32, index: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("vertex {0} used before definition")]
    UseBeforeDef(VertexId),
    #[error("{0} assigned twice")]
    DoubleAssignment(String),
    #[error("kind mismatch: {0}")]
    KindMismatch(String),
    #[error("graph is invalid: {0:?}")]
    InvalidGraph(Vec<GraphViolation>),
    #[error("dependency cycle detected")]
    CycleDetected,

    #[error("no synapse arrays available for allocation")]
    NoArrays,
    #[error("convolution has an empty output")]
    EmptyOutput,
    #[error("unrolled kernel with {rows} rows x {cols} cols does not fit a {cap_rows}-row array")]
    KernelTooLarge { rows: usize, cols: usize, cap_rows: usize },

    #[error("requested {requested} chips, only {available} configured")]
    Unavailable { requested: usize, available: usize },
    #[error("chips are held by another owner")]
    Busy,
    #[error("executor deadlock: {0}")]
    DeadlockDetected(String),
    #[error("instance bound to chip {chip} array {array}, which is not held by the executor")]
    UnboundArray { chip: usize, array: usize },

    #[error("backward called without saved forward state")]
    MissingState,
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: expected {expected} columns, found {found}")]
    RaggedRow { file: PathBuf, line: usize, expected: usize, found: usize },
    #[error("{file}:{line}: label {label} out of range")]
    LabelOutOfRange { file: PathBuf, line: usize, label: i64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
