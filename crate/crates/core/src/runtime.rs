//! Keyframe-triggered supervision of fused actions.
//!
//! A query goes out only when the executed gripper command differs from the
//! previous one by more than `delta_g`. Any backend failure or unparseable
//! reply leaves the action untouched; the loop never blocks on the supervisor
//! beyond the backend's own timeout.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::action::ActionVector;
use crate::codec::{build_prompt, parse_response, GripperEvent, ParsedCorrection, Thresholds, Verdict};
use crate::error::BackendError;
use crate::sim::SimState;

/// Image handed to the supervisor. Bytes are never decoded here.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ImageRef {
    #[default]
    None,
    Path(PathBuf),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisorQuery {
    pub image: ImageRef,
    pub prompt: String,
    pub timestep: u64,
    pub event: GripperEvent,
}

/// Extra information available to backends that read ground truth.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext<'a> {
    pub proposed: &'a ActionVector,
    pub truth: Option<&'a SimState>,
}

/// Anything that answers a keyframe query with natural-language text.
pub trait Supervisor {
    fn respond(&mut self, query: &SupervisorQuery, ctx: &QueryContext<'_>) -> Result<String, BackendError>;
}

impl<S: Supervisor + ?Sized> Supervisor for Box<S> {
    fn respond(&mut self, query: &SupervisorQuery, ctx: &QueryContext<'_>) -> Result<String, BackendError> {
        (**self).respond(query, ctx)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopStats {
    pub steps: u64,
    pub keyframes: u64,
    /// Queries actually sent to a backend.
    pub calls: u64,
    pub corrections: u64,
    pub approvals: u64,
    /// Backend failures and unparseable replies, both executed uncorrected.
    pub malformed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub g_prev: f64,
    pub delta_g: f64,
    pub stats: LoopStats,
}

impl LoopState {
    pub fn new(delta_g: f64) -> Self {
        LoopState {
            g_prev: 0.0,
            delta_g,
            stats: LoopStats::default(),
        }
    }
}

pub fn is_keyframe(g: f64, state: &LoopState) -> bool {
    (g - state.g_prev).abs() > state.delta_g
}

/// Adds the correction to x, y, z and rz; rx, ry and the gripper are left
/// alone. Approvals return the action unchanged.
pub fn apply_correction(action: &ActionVector, parsed: &ParsedCorrection) -> ActionVector {
    if parsed.verdict == Verdict::Approve {
        return *action;
    }
    let d = parsed.delta;
    ActionVector {
        dx: action.dx + d.dx,
        dy: action.dy + d.dy,
        dz: action.dz + d.dz,
        drz: action.drz + d.drz,
        ..*action
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KeyframeOutcome {
    /// No backend attached.
    Unsupervised,
    Approved {
        response: String,
    },
    Corrected {
        response: String,
        parsed: ParsedCorrection,
    },
    /// Backend error or unparseable reply; the action ran uncorrected.
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub action: ActionVector,
    pub keyframe: Option<(GripperEvent, KeyframeOutcome)>,
}

/// One control step of the supervisor loop.
///
/// `action` is the fused (and, if configured, binarized) command. On a
/// keyframe the backend is queried once, its reply parsed and applied.
#[allow(clippy::too_many_arguments)]
pub fn supervise_step(
    action: &ActionVector,
    image: ImageRef,
    instruction: &str,
    timestep: u64,
    state: &mut LoopState,
    thresholds: &Thresholds,
    client: Option<&mut (dyn Supervisor + '_)>,
    truth: Option<&SimState>,
) -> StepOutcome {
    state.stats.steps += 1;
    let g = action.g;
    if !is_keyframe(g, state) {
        state.g_prev = g;
        return StepOutcome {
            action: *action,
            keyframe: None,
        };
    }
    state.stats.keyframes += 1;
    let event = GripperEvent::from_transition(state.g_prev, g);
    state.g_prev = g;

    let Some(client) = client else {
        return StepOutcome {
            action: *action,
            keyframe: Some((event, KeyframeOutcome::Unsupervised)),
        };
    };

    let failed = |state: &mut LoopState, reason: String| {
        state.stats.malformed += 1;
        StepOutcome {
            action: *action,
            keyframe: Some((event, KeyframeOutcome::Failed { reason })),
        }
    };

    let prompt = match build_prompt(instruction, event) {
        Ok(p) => p,
        Err(e) => return failed(state, e.to_string()),
    };
    let query = SupervisorQuery {
        image,
        prompt,
        timestep,
        event,
    };
    state.stats.calls += 1;
    let ctx = QueryContext {
        proposed: action,
        truth,
    };
    let response = match client.respond(&query, &ctx) {
        Ok(r) => r,
        Err(e) => return failed(state, e.to_string()),
    };
    let parsed = match parse_response(&response, thresholds) {
        Ok(p) => p,
        Err(e) => return failed(state, e.to_string()),
    };
    match parsed.verdict {
        Verdict::Approve => {
            state.stats.approvals += 1;
            StepOutcome {
                action: *action,
                keyframe: Some((event, KeyframeOutcome::Approved { response })),
            }
        }
        Verdict::Correct => {
            state.stats.corrections += 1;
            StepOutcome {
                action: apply_correction(action, &parsed),
                keyframe: Some((event, KeyframeOutcome::Corrected { response, parsed })),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CorrectionDelta;

    struct Fixed(Vec<Result<String, ()>>, usize);

    impl Supervisor for Fixed {
        fn respond(&mut self, _: &SupervisorQuery, _: &QueryContext<'_>) -> Result<String, BackendError> {
            let i = self.1.min(self.0.len() - 1);
            self.1 += 1;
            self.0[i].clone().map_err(|_| BackendError::Offline)
        }
    }

    fn act(g: f64) -> ActionVector {
        ActionVector::new(0.01, -0.02, 0.02, 0.0, 0.0, 0.03, g)
    }

    fn step(a: &ActionVector, state: &mut LoopState, client: Option<&mut dyn Supervisor>) -> StepOutcome {
        supervise_step(
            a,
            ImageRef::None,
            "pick up the cube",
            0,
            state,
            &Thresholds::default(),
            client,
            None,
        )
    }

    #[test]
    fn trigger_threshold() {
        let mut s = LoopState::new(0.5);
        assert!(is_keyframe(1.0, &s));
        assert!(!is_keyframe(0.4, &s));
        s.g_prev = 1.0;
        assert!(!is_keyframe(1.0, &s));
    }

    #[test]
    fn correction_is_additive_on_expressible_axes() {
        let a = act(1.0);
        let approve = ParsedCorrection::approve("Yes.");
        assert_eq!(apply_correction(&a, &approve), a);
        let up = ParsedCorrection {
            verdict: Verdict::Correct,
            delta: CorrectionDelta::new(0.0, 0.0, 0.1, 0.0),
            raw_text: String::new(),
        };
        let out = apply_correction(&a, &up);
        assert!((out.dz - 0.12).abs() < 1e-15);
        assert_eq!((out.dx, out.dy, out.drz, out.g), (a.dx, a.dy, a.drz, a.g));
        let mixed = ParsedCorrection {
            verdict: Verdict::Correct,
            delta: CorrectionDelta::new(0.0, 0.01, 0.0, -0.01),
            raw_text: String::new(),
        };
        let out = apply_correction(&a, &mixed);
        assert_eq!(out.dy, a.dy + 0.01);
        assert_eq!(out.drz, a.drz - 0.01);
        assert_eq!((out.drx, out.dry, out.g), (a.drx, a.dry, a.g));
    }

    #[test]
    fn steady_gripper_never_queries() {
        let mut client = Fixed(vec![Ok("No. Move up. Large.".into())], 0);
        let mut s = LoopState::new(0.5);
        for _ in 0..100 {
            let out = step(&act(0.0), &mut s, Some(&mut client));
            assert_eq!(out.action, act(0.0));
        }
        assert_eq!(client.1, 0);
        assert_eq!(s.stats.steps, 100);
    }

    #[test]
    fn one_call_per_transition() {
        let mut client = Fixed(vec![Ok("Yes.".into())], 0);
        let mut s = LoopState::new(0.5);
        for g in [0., 0., 1., 1., 1., 0., 0.] {
            let out = step(&act(g), &mut s, Some(&mut client));
            assert_eq!(out.action, act(g));
        }
        assert_eq!(client.1, 2);
        assert_eq!(s.stats.approvals, 2);
        assert_eq!(s.stats.keyframes, 2);
    }

    #[test]
    fn correction_applied_at_keyframe() {
        let mut client = Fixed(vec![Ok("No. Move up. Large.".into())], 0);
        let mut s = LoopState::new(0.5);
        let out = step(&act(1.0), &mut s, Some(&mut client));
        assert!((out.action.dz - 0.12).abs() < 1e-15);
        assert_eq!(s.stats.corrections, 1);
        assert!(matches!(
            out.keyframe,
            Some((GripperEvent::Close, KeyframeOutcome::Corrected { .. }))
        ));
    }

    #[test]
    fn failures_are_fail_open() {
        let mut s = LoopState::new(0.5);
        let mut err = Fixed(vec![Err(())], 0);
        let out = step(&act(1.0), &mut s, Some(&mut err));
        assert_eq!(out.action, act(1.0));
        assert_eq!(s.stats.malformed, 1);

        let mut garbled = Fixed(vec![Ok("Perhaps move left".into())], 0);
        let out = step(&act(0.0), &mut s, Some(&mut garbled));
        assert_eq!(out.action, act(0.0));
        assert_eq!(s.stats.malformed, 2);
        assert_eq!(s.g_prev, 0.0);
        assert!(matches!(
            out.keyframe,
            Some((GripperEvent::Open, KeyframeOutcome::Failed { .. }))
        ));
    }

    #[test]
    fn no_client_counts_keyframes_only() {
        let mut s = LoopState::new(0.5);
        step(&act(1.0), &mut s, None);
        assert_eq!((s.stats.keyframes, s.stats.calls), (1, 0));
    }
}
