//! Action vectors, prediction chunks and the buffer that lines up historical
//! chunk predictions for a target timestep.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::ActionError;

/// Default number of actions predicted per policy inference.
pub const DEFAULT_HORIZON: usize = 15;

/// A 7-D end-effector command in the robot base frame.
///
/// Translations are meters, rotations radians, and `g` is the gripper command
/// (0 open, 1 closed).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "[f64; 7]", from = "[f64; 7]")]
pub struct ActionVector {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub drx: f64,
    pub dry: f64,
    pub drz: f64,
    pub g: f64,
}

impl ActionVector {
    pub const ZERO: ActionVector = ActionVector {
        dx: 0.0,
        dy: 0.0,
        dz: 0.0,
        drx: 0.0,
        dry: 0.0,
        drz: 0.0,
        g: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dz: f64, drx: f64, dry: f64, drz: f64, g: f64) -> Self {
        ActionVector {
            dx,
            dy,
            dz,
            drx,
            dry,
            drz,
            g,
        }
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        ActionVector::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.dx, self.dy, self.dz, self.drx, self.dry, self.drz, self.g]
    }

    /// The six pose components, without the gripper.
    pub fn pose(&self) -> [f64; 6] {
        [self.dx, self.dy, self.dz, self.drx, self.dry, self.drz]
    }

    pub fn from_pose(pose: [f64; 6], g: f64) -> Self {
        ActionVector::new(pose[0], pose[1], pose[2], pose[3], pose[4], pose[5], g)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Checks finiteness and the gripper range. With `binary_gripper` the
    /// gripper must be exactly 0 or 1.
    pub fn validate(&self, binary_gripper: bool) -> Result<(), ActionError> {
        if !self.is_finite() {
            return Err(ActionError::NonFinite);
        }
        if !(0.0..=1.0).contains(&self.g) {
            return Err(ActionError::GripperOutOfRange(self.g));
        }
        if binary_gripper && self.g != 0.0 && self.g != 1.0 {
            return Err(ActionError::GripperNotBinary(self.g));
        }
        Ok(())
    }

    /// Thresholds the gripper at 0.5.
    pub fn with_binary_gripper(mut self) -> Self {
        self.g = if self.g >= 0.5 { 1.0 } else { 0.0 };
        self
    }
}

impl From<ActionVector> for [f64; 7] {
    fn from(a: ActionVector) -> Self {
        a.to_array()
    }
}

impl From<[f64; 7]> for ActionVector {
    fn from(v: [f64; 7]) -> Self {
        ActionVector::from_array(v)
    }
}

/// H actions predicted from the observation at `issued_at`; `actions[j]` is
/// the prediction for timestep `issued_at + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionChunk {
    pub issued_at: u64,
    pub actions: Vec<ActionVector>,
}

impl PredictionChunk {
    pub fn new(issued_at: u64, actions: Vec<ActionVector>) -> Result<Self, ActionError> {
        if actions.is_empty() {
            return Err(ActionError::EmptyChunk { issued_at });
        }
        if let Some(j) = actions.iter().position(|a| !a.is_finite()) {
            return Err(ActionError::NonFiniteInChunk { issued_at, index: j });
        }
        Ok(PredictionChunk { issued_at, actions })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Prediction for absolute timestep `t`, if this chunk covers it.
    pub fn prediction_for(&self, t: u64) -> Option<&ActionVector> {
        let offset = t.checked_sub(self.issued_at)?;
        self.actions.get(usize::try_from(offset).ok()?)
    }
}

/// Why a chunk did not contribute to an aligned prediction list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentNote {
    /// No chunk was issued at `issued_at` (not yet pushed, or evicted).
    Missing { issued_at: u64 },
    /// The chunk exists but `t` lies beyond its horizon.
    HorizonExceeded { issued_at: u64, horizon: usize },
}

/// Predictions for one timestep, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPredictions {
    pub t: u64,
    pub actions: Vec<ActionVector>,
    pub requested: usize,
    pub notes: Vec<AlignmentNote>,
}

impl AlignedPredictions {
    pub fn count(&self) -> usize {
        self.actions.len()
    }

    pub fn is_complete(&self) -> bool {
        self.actions.len() == self.requested
    }
}

/// Ring of consecutive chunks, newest first, holding at most `capacity`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBuffer {
    capacity: usize,
    horizon: usize,
    chunks: VecDeque<PredictionChunk>,
}

impl PredictionBuffer {
    pub fn new(capacity: usize, horizon: usize) -> Result<Self, ActionError> {
        if capacity == 0 {
            return Err(ActionError::ZeroCapacity);
        }
        if horizon == 0 {
            return Err(ActionError::ZeroHorizon);
        }
        Ok(PredictionBuffer {
            capacity,
            horizon,
            chunks: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn newest_issued_at(&self) -> Option<u64> {
        self.chunks.front().map(|c| c.issued_at)
    }

    pub fn chunks(&self) -> impl Iterator<Item = &PredictionChunk> {
        self.chunks.iter()
    }

    /// Drops all chunks, e.g. at an episode boundary.
    pub fn clear(&mut self) {
        self.chunks.clear();
    }

    /// Pushes the chunk for the next control step, evicting the oldest when
    /// full. A chunk must be issued exactly one step after the newest.
    pub fn push_chunk(&mut self, chunk: PredictionChunk) -> Result<(), ActionError> {
        if chunk.horizon() != self.horizon {
            return Err(ActionError::HorizonMismatch {
                issued_at: chunk.issued_at,
                expected: self.horizon,
                found: chunk.horizon(),
            });
        }
        if let Some(newest) = self.newest_issued_at() {
            if chunk.issued_at != newest + 1 {
                return Err(ActionError::Gap {
                    newest,
                    pushed: chunk.issued_at,
                });
            }
        }
        self.chunks.push_front(chunk);
        self.chunks.truncate(self.capacity);
        Ok(())
    }

    fn chunk_issued_at(&self, issued_at: u64) -> Option<&PredictionChunk> {
        let newest = self.newest_issued_at()?;
        let idx = newest.checked_sub(issued_at)?;
        self.chunks.get(usize::try_from(idx).ok()?)
    }

    /// Returns `chunk(t-k).actions[k]` for `k = 0..n`, newest first. Chunks
    /// that are missing or whose horizon does not reach `t` are skipped and
    /// noted; the list is never padded.
    pub fn aligned_predictions(&self, t: u64, n: usize) -> Result<AlignedPredictions, ActionError> {
        if n == 0 || n > self.capacity {
            return Err(ActionError::DepthOutOfRange {
                requested: n,
                capacity: self.capacity,
            });
        }
        let mut out = AlignedPredictions {
            t,
            actions: Vec::with_capacity(n),
            requested: n,
            notes: Vec::new(),
        };
        for k in 0..n as u64 {
            let Some(issued_at) = t.checked_sub(k) else {
                break;
            };
            match self.chunk_issued_at(issued_at) {
                None => out.notes.push(AlignmentNote::Missing { issued_at }),
                Some(chunk) => match chunk.prediction_for(t) {
                    Some(a) => out.actions.push(*a),
                    None => out.notes.push(AlignmentNote::HorizonExceeded {
                        issued_at,
                        horizon: chunk.horizon(),
                    }),
                },
            }
        }
        Ok(out)
    }
}
