//! Dual-stream fusion of aligned historical predictions.
//!
//! The pose stream weights each prediction by the sigmoid of its cosine
//! similarity to the newest prediction times an exponential recency decay.
//! The gripper stream uses the normalized decay alone, so gripper weights
//! never depend on pose or gripper values.

use serde::{Deserialize, Serialize};

use crate::action::ActionVector;
use crate::error::FusionError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    /// Sigmoid scale applied to the cosine similarity.
    pub alpha: f64,
    /// Exponential decay rate per step of prediction age.
    pub lambda: f64,
    /// Regularization factor in `[0, 1)`.
    pub beta: f64,
    /// Stabilizer in the cosine denominator.
    pub epsilon: f64,
    /// History depth N.
    pub n: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            alpha: 0.1,
            lambda: 0.01,
            beta: 0.01,
            epsilon: 1e-7,
            n: 4,
        }
    }
}

impl FusionParams {
    /// Validates ranges, including `n <= horizon`.
    pub fn validate(&self, horizon: usize) -> Result<(), FusionError> {
        let bad = |m: String| Err(FusionError::Param(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be > 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0, 1), got {}", self.beta));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.n < 1 || self.n > horizon {
            return bad(format!("history depth n must be in 1..={horizon}, got {}", self.n));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub pose_weights: Vec<f64>,
    pub gripper_weights: Vec<f64>,
    pub similarities: Vec<f64>,
    /// How many raw pose weights the `max(0, .)` clamp zeroed. Always 0 for
    /// valid parameters; kept so callers can assert it.
    pub clamp_activations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionResult {
    pub fused: ActionVector,
    pub pose_weights: Vec<f64>,
    pub gripper_weights: Vec<f64>,
    pub similarities: Vec<f64>,
}

fn dot(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64; 6]) -> f64 {
    dot(a, a).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pose weights, gripper weights and cosine similarities for newest-first
/// pose predictions.
pub fn fusion_weights(poses: &[[f64; 6]], params: &FusionParams) -> Result<FusionWeights, FusionError> {
    if poses.is_empty() {
        return Err(FusionError::Empty);
    }
    if poses.len() > params.n {
        return Err(FusionError::TooMany {
            got: poses.len(),
            max: params.n,
        });
    }
    if let Some(index) = poses.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(FusionError::NonFinite { index });
    }

    let reference = &poses[0];
    let reference_norm = norm(reference);

    let similarities: Vec<f64> = poses
        .iter()
        .map(|p| dot(p, reference) / (norm(p) * reference_norm + params.epsilon))
        .collect();

    let decay: Vec<f64> = (0..poses.len()).map(|k| (-params.lambda * k as f64).exp()).collect();

    let mut clamp_activations = 0;
    let raw: Vec<f64> = similarities
        .iter()
        .zip(&decay)
        .map(|(sim, d)| {
            let s = sigmoid(params.alpha * sim);
            let w = (1.0 - params.beta) * s * d;
            if w < 0.0 {
                clamp_activations += 1;
            }
            w.max(0.0)
        })
        .collect();
    let raw_total: f64 = raw.iter().sum();
    let pose_weights = raw.iter().map(|w| w / raw_total).collect();

    let decay_total: f64 = decay.iter().sum();
    let gripper_weights = decay.iter().map(|d| d / decay_total).collect();

    Ok(FusionWeights {
        pose_weights,
        gripper_weights,
        similarities,
        clamp_activations,
    })
}

/// Fuses newest-first predictions for one timestep.
pub fn fuse(predictions: &[ActionVector], params: &FusionParams) -> Result<FusionResult, FusionError> {
    if let Some((index, a)) = predictions
        .iter()
        .enumerate()
        .find(|(_, a)| a.g.is_finite() && !(0.0..=1.0).contains(&a.g))
    {
        return Err(FusionError::Gripper { index, value: a.g });
    }
    if let Some(index) = predictions.iter().position(|a| !a.g.is_finite()) {
        return Err(FusionError::NonFinite { index });
    }
    let poses: Vec<[f64; 6]> = predictions.iter().map(ActionVector::pose).collect();
    let weights = fusion_weights(&poses, params)?;

    // Accumulated as offsets from the newest prediction. Since the weights sum
    // to one this equals the plain weighted sum, but identical inputs come
    // back bit-exact.
    let base = poses[0];
    let mut pose = base;
    for (p, w) in poses.iter().zip(&weights.pose_weights).skip(1) {
        for i in 0..6 {
            pose[i] += w * (p[i] - base[i]);
        }
    }
    let g0 = predictions[0].g;
    let mut g = g0;
    for (a, w) in predictions.iter().zip(&weights.gripper_weights).skip(1) {
        g += w * (a.g - g0);
    }

    // Rounding may step an ulp outside the inputs' range.
    for (i, value) in pose.iter_mut().enumerate() {
        let (lo, hi) = component_range(poses.iter().map(|p| p[i]));
        *value = value.clamp(lo, hi);
    }
    let (glo, ghi) = component_range(predictions.iter().map(|a| a.g));
    g = g.clamp(glo, ghi);

    Ok(FusionResult {
        fused: ActionVector::from_pose(pose, g),
        pose_weights: weights.pose_weights,
        gripper_weights: weights.gripper_weights,
        similarities: weights.similarities,
    })
}

fn component_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}
