use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionError {
    #[error("action has non-finite components")]
    NonFinite,
    #[error("gripper command {0} outside [0, 1]")]
    GripperOutOfRange(f64),
    #[error("gripper command {0} is not binary")]
    GripperNotBinary(f64),
    #[error("chunk issued at {issued_at} has no actions")]
    EmptyChunk { issued_at: u64 },
    #[error("chunk issued at {issued_at} has a non-finite action at index {index}")]
    NonFiniteInChunk { issued_at: u64, index: usize },
    #[error("chunk issued at {issued_at} has horizon {found}, buffer expects {expected}")]
    HorizonMismatch {
        issued_at: u64,
        expected: usize,
        found: usize,
    },
    #[error("chunk issued at {pushed} does not follow newest chunk {newest}; reset the buffer between episodes")]
    Gap { newest: u64, pushed: u64 },
    #[error("buffer capacity must be at least 1")]
    ZeroCapacity,
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("requested history depth {requested} outside 1..={capacity}")]
    DepthOutOfRange { requested: usize, capacity: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("invalid fusion parameter: {0}")]
    Param(String),
    #[error("no predictions to fuse")]
    Empty,
    #[error("{got} predictions exceed history depth {max}")]
    TooMany { got: usize, max: usize },
    #[error("prediction {index} has non-finite components")]
    NonFinite { index: usize },
    #[error("prediction {index} has gripper value {value} outside [0, 1]")]
    Gripper { index: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
    #[error("correction has non-finite components")]
    NonFinite,
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("response is empty")]
    EmptyResponse,
    #[error("response does not start with Yes or No: {0:?}")]
    Malformed(String),
    #[error("response violates the correction grammar at {position}: {reason}")]
    Grammar { position: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("episode {id}: {message}")]
    Episode { id: String, message: String },
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("supervisor request timed out")]
    Timeout,
    #[error("supervisor returned HTTP {0}")]
    Status(u16),
    #[error("supervisor reply does not match schema: {0}")]
    Schema(String),
    #[error("cannot read image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("backend is offline")]
    Offline,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Action(#[from] ActionError),
}
