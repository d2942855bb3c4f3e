//! Failure prediction and correction for chunked robot action policies.
//!
//! Overlapping action chunks are fused into one command per step, and a
//! supervisor is consulted only when the gripper changes state. Its
//! natural-language verdict is parsed back into a small additive correction.

pub mod action;
pub mod backends;
pub mod cli;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod runtime;
pub mod sim;

pub use action::{ActionVector, AlignedPredictions, PredictionBuffer, PredictionChunk, DEFAULT_HORIZON};
pub use codec::{CorrectionDelta, CorrectionText, GripperEvent, ParsedCorrection, Thresholds, Verdict};
pub use fusion::{fuse, FusionParams, FusionResult};
pub use runtime::{supervise_step, LoopState, Supervisor};
