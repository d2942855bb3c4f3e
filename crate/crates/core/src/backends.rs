//! Supervisor implementations: a ground-truth oracle for simulation, a
//! scripted fixture, and an HTTP client for hosted vision-language models.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::action::ActionVector;
use crate::codec::{compose_answer, discretize, CorrectionDelta, GripperEvent, Thresholds};
use crate::error::BackendError;
use crate::runtime::{ImageRef, QueryContext, Supervisor, SupervisorQuery};
use crate::sim::{integrate, wrap_angle, Pose, SimState, TaskSpec, Workspace};

/// Environment variable overriding the HTTP endpoint (a CLI flag wins).
pub const SUPERVISOR_URL_ENV: &str = "FPC_SUPERVISOR_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    None,
    Oracle,
    Scripted,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(BackendKind::None),
            "oracle" => Ok(BackendKind::Oracle),
            "scripted" => Ok(BackendKind::Scripted),
            "http" => Ok(BackendKind::Http),
            other => Err(format!("unknown supervisor kind {other:?}")),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::None => "none",
            BackendKind::Oracle => "oracle",
            BackendKind::Scripted => "scripted",
            BackendKind::Http => "http",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    pub script: Vec<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::None,
            endpoint: None,
            timeout_ms: 5_000,
            retries: 0,
            script: Vec::new(),
        }
    }
}

impl BackendConfig {
    pub fn of_kind(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::Config("timeout must be > 0 ms".into()));
        }
        match self.kind {
            BackendKind::Http if self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) => {
                Err(BackendError::Config("http supervisor needs an endpoint".into()))
            }
            BackendKind::Scripted if self.script.is_empty() => Err(BackendError::Config(
                "scripted supervisor needs at least one response".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// What the oracle needs to know about the world beyond the live state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSpec {
    pub task: TaskSpec,
    pub workspace: Workspace,
    pub grasp_tolerance: f64,
    pub yaw_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleReply {
    pub text: String,
    /// The event referred to an object the oracle could not find.
    pub blind: bool,
}

/// Renders the true correction for the pose `proposed` would reach.
///
/// For a close event the goal is the task object's pose, for an open event
/// the centre of the task target. The reply is produced through the same
/// codec a trained model would have learned, never as raw numbers.
pub fn oracle_respond(
    query: &SupervisorQuery,
    truth: &SimState,
    proposed: &ActionVector,
    th: &Thresholds,
    spec: &OracleSpec,
) -> OracleReply {
    let approve = |blind| OracleReply {
        text: "Yes.".to_string(),
        blind,
    };
    let post = integrate(&truth.gripper_pose, proposed, &spec.workspace);
    let object = truth.objects.get(spec.task.object);
    let delta = match query.event {
        GripperEvent::Close => {
            let Some(object) = object.filter(|o| !o.held) else {
                return approve(true);
            };
            let yaw_error = wrap_angle(object.yaw - post.rz);
            if post.distance_to(&object.position) <= spec.grasp_tolerance && yaw_error.abs() <= spec.yaw_tolerance {
                return approve(false);
            }
            offset_to(&post, &object.position, yaw_error)
        }
        GripperEvent::Open => {
            let held = object.is_some_and(|o| o.held);
            let Some(target) = truth.targets.get(spec.task.target).filter(|_| held) else {
                return approve(true);
            };
            if post.distance_to(&target.center) <= target.radius {
                return approve(false);
            }
            offset_to(&post, &target.center, 0.0)
        }
    };
    match discretize(&delta, th) {
        Ok(text) => OracleReply {
            text: compose_answer(&text),
            blind: false,
        },
        Err(_) => approve(true),
    }
}

fn offset_to(from: &Pose, to: &[f64; 3], drz: f64) -> CorrectionDelta {
    CorrectionDelta::new(to[0] - from.x, to[1] - from.y, to[2] - from.z, drz)
}

#[derive(Debug, Clone)]
pub struct OracleSupervisor {
    spec: OracleSpec,
    thresholds: Thresholds,
    blind: u64,
}

impl OracleSupervisor {
    pub fn new(spec: OracleSpec, thresholds: Thresholds) -> Self {
        OracleSupervisor {
            spec,
            thresholds,
            blind: 0,
        }
    }

    pub fn blind_count(&self) -> u64 {
        self.blind
    }
}

impl Supervisor for OracleSupervisor {
    fn respond(&mut self, query: &SupervisorQuery, ctx: &QueryContext<'_>) -> Result<String, BackendError> {
        let Some(truth) = ctx.truth else {
            self.blind += 1;
            return Ok("Yes.".to_string());
        };
        let reply = oracle_respond(query, truth, ctx.proposed, &self.thresholds, &self.spec);
        if reply.blind {
            self.blind += 1;
        }
        Ok(reply.text)
    }
}

/// Replays a fixed list of responses, repeating the last one once exhausted.
#[derive(Debug, Clone)]
pub struct ScriptedSupervisor {
    script: Vec<String>,
    cursor: usize,
}

impl ScriptedSupervisor {
    pub fn new(script: Vec<String>) -> Result<Self, BackendError> {
        if script.is_empty() {
            return Err(BackendError::Config(
                "scripted supervisor needs at least one response".into(),
            ));
        }
        Ok(ScriptedSupervisor { script, cursor: 0 })
    }

    pub fn next_response(&mut self) -> String {
        let i = self.cursor.min(self.script.len() - 1);
        self.cursor = self.cursor.saturating_add(1);
        self.script[i].clone()
    }
}

impl Supervisor for ScriptedSupervisor {
    fn respond(&mut self, _query: &SupervisorQuery, _ctx: &QueryContext<'_>) -> Result<String, BackendError> {
        Ok(self.next_response())
    }
}

/// Fails every query. Stands in for a backend found unreachable at startup.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineSupervisor;

impl Supervisor for OfflineSupervisor {
    fn respond(&mut self, _query: &SupervisorQuery, _ctx: &QueryContext<'_>) -> Result<String, BackendError> {
        Err(BackendError::Offline)
    }
}

#[derive(Debug, Serialize)]
struct SuperviseRequest<'a> {
    prompt: &'a str,
    image_b64: Option<String>,
    timestep: u64,
}

#[derive(Debug, Deserialize)]
struct SuperviseReply {
    text: String,
}

/// Client for `POST <endpoint>/v1/supervise`.
pub struct HttpSupervisor {
    client: reqwest::blocking::Client,
    url: String,
    retries: u32,
}

impl HttpSupervisor {
    pub fn new(endpoint: &str, timeout: Duration, retries: u32) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpSupervisor {
            client,
            url: format!("{}/v1/supervise", endpoint.trim_end_matches('/')),
            retries,
        })
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let endpoint = cfg
            .endpoint
            .as_deref()
            .ok_or_else(|| BackendError::Config("http supervisor needs an endpoint".into()))?;
        HttpSupervisor::new(endpoint, Duration::from_millis(cfg.timeout_ms), cfg.retries)
    }

    fn encode_image(image: &ImageRef) -> Result<Option<String>, BackendError> {
        let engine = base64::engine::general_purpose::STANDARD;
        Ok(match image {
            ImageRef::None => None,
            ImageRef::Bytes(bytes) => Some(engine.encode(bytes)),
            ImageRef::Path(path) => {
                let bytes = std::fs::read(path).map_err(|source| BackendError::Image {
                    path: path.display().to_string(),
                    source,
                })?;
                Some(engine.encode(bytes))
            }
        })
    }

    /// Checks that something answers at the endpoint. Any HTTP status counts
    /// as reachable; only transport failures and timeouts do not.
    pub fn probe(&self) -> Result<(), BackendError> {
        let body = SuperviseRequest {
            prompt: "",
            image_b64: None,
            timestep: 0,
        };
        match self.attempt(&body) {
            Err(e @ (BackendError::Transport(_) | BackendError::Timeout)) => Err(e),
            _ => Ok(()),
        }
    }

    fn attempt(&self, body: &SuperviseRequest<'_>) -> Result<String, BackendError> {
        let response = self.client.post(&self.url).json(body).send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::Status(status.as_u16()));
        }
        let bytes = response.bytes().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let reply: SuperviseReply = serde_json::from_slice(&bytes).map_err(|e| BackendError::Schema(e.to_string()))?;
        Ok(reply.text)
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::Transport(_) | BackendError::Timeout => true,
        BackendError::Status(code) => *code >= 500,
        _ => false,
    }
}

impl Supervisor for HttpSupervisor {
    fn respond(&mut self, query: &SupervisorQuery, _ctx: &QueryContext<'_>) -> Result<String, BackendError> {
        let body = SuperviseRequest {
            prompt: &query.prompt,
            image_b64: Self::encode_image(&query.image)?,
            timestep: query.timestep,
        };
        let mut result = self.attempt(&body);
        for _ in 0..self.retries {
            match &result {
                Err(e) if retryable(e) => result = self.attempt(&body),
                _ => break,
            }
        }
        result
    }
}

/// Builds the supervisor for one episode loop. `None` means unsupervised.
pub fn build_supervisor(
    cfg: &BackendConfig,
    oracle: OracleSpec,
    thresholds: Thresholds,
) -> Result<Option<Box<dyn Supervisor + Send>>, BackendError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackendKind::None => None,
        BackendKind::Oracle => Some(Box::new(OracleSupervisor::new(oracle, thresholds))),
        BackendKind::Scripted => Some(Box::new(ScriptedSupervisor::new(cfg.script.clone())?)),
        BackendKind::Http => Some(Box::new(HttpSupervisor::from_config(cfg)?)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{SimObject, TargetRegion};

    fn spec() -> OracleSpec {
        OracleSpec {
            task: TaskSpec { object: 0, target: 0 },
            workspace: Workspace {
                min: [-1.0, -1.0, -1.0],
                max: [1.0, 1.0, 1.0],
            },
            grasp_tolerance: 0.02,
            yaw_tolerance: 0.1,
        }
    }

    fn state(object: [f64; 3], yaw: f64, held: bool) -> SimState {
        SimState {
            gripper_pose: Pose {
                x: 0.0,
                y: 0.0,
                z: 0.3,
                rz: 0.0,
            },
            gripper_closed: held,
            objects: vec![SimObject {
                position: object,
                yaw,
                held,
            }],
            targets: vec![TargetRegion {
                center: [0.3, 0.0, 0.1],
                radius: 0.05,
            }],
            tick: 0,
        }
    }

    fn query(event: GripperEvent) -> SupervisorQuery {
        SupervisorQuery {
            image: ImageRef::None,
            prompt: "p".into(),
            timestep: 3,
            event,
        }
    }

    fn respond(event: GripperEvent, s: &SimState, a: &ActionVector) -> OracleReply {
        oracle_respond(&query(event), s, a, &Thresholds::default(), &spec())
    }

    #[test]
    fn oracle_approves_exact_landing() {
        let s = state([0.1, 0.0, 0.2], 0.0, false);
        let a = ActionVector::new(0.1, 0.0, -0.1, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(respond(GripperEvent::Close, &s, &a).text, "Yes.");
    }

    #[test]
    fn oracle_left_and_down() {
        let s = state([0.0, 0.05, 0.1], 0.0, false);
        let a = ActionVector::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        // post-action gripper is 0.2 above and 0.05 right of the object
        let r = respond(GripperEvent::Close, &s, &a);
        assert_eq!(r.text, "No. Move left. Small. Move down. Large.");
        assert!(!r.blind);
    }

    #[test]
    fn oracle_yaw_only() {
        let mut s = state([0.0, 0.0, 0.3], 0.0, false);
        s.objects[0].yaw = -0.02;
        let a = ActionVector {
            g: 1.0,
            ..ActionVector::ZERO
        };
        let spec = OracleSpec {
            yaw_tolerance: 0.01,
            ..spec()
        };
        let r = oracle_respond(&query(GripperEvent::Close), &s, &a, &Thresholds::default(), &spec);
        assert_eq!(r.text, "No. Rotate clockwise. Small.");
    }

    #[test]
    fn oracle_open_targets_region_center() {
        let mut s = state([0.0, 0.0, 0.3], 0.0, true);
        s.gripper_pose = Pose {
            x: 0.3,
            y: -0.2,
            z: 0.1,
            rz: 0.0,
        };
        let a = ActionVector {
            g: 0.0,
            ..ActionVector::ZERO
        };
        assert_eq!(respond(GripperEvent::Open, &s, &a).text, "No. Move left. Large.");
        s.gripper_pose.y = 0.03;
        assert_eq!(respond(GripperEvent::Open, &s, &a).text, "Yes.");
    }

    #[test]
    fn oracle_blind_without_relevant_object() {
        let s = state([0.0, 0.0, 0.3], 0.0, false);
        let a = ActionVector::ZERO;
        let r = respond(GripperEvent::Open, &s, &a);
        assert_eq!(
            r,
            OracleReply {
                text: "Yes.".into(),
                blind: true
            }
        );
        let mut sup = OracleSupervisor::new(spec(), Thresholds::default());
        let ctx = QueryContext {
            proposed: &a,
            truth: Some(&s),
        };
        sup.respond(&query(GripperEvent::Open), &ctx).unwrap();
        assert_eq!(sup.blind_count(), 1);
    }

    #[test]
    fn scripted_order_and_repeat() {
        let mut s = ScriptedSupervisor::new(vec!["Yes.".into()]).unwrap();
        for _ in 0..3 {
            assert_eq!(s.next_response(), "Yes.");
        }
        let mut s = ScriptedSupervisor::new(vec!["No. Move up. Large.".into(), "Yes.".into()]).unwrap();
        assert_eq!(s.next_response(), "No. Move up. Large.");
        assert_eq!(s.next_response(), "Yes.");
        assert_eq!(s.next_response(), "Yes.");
        assert!(ScriptedSupervisor::new(vec![]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::of_kind(BackendKind::Http).validate().is_err());
        assert!(BackendConfig::of_kind(BackendKind::Scripted).validate().is_err());
        assert!(BackendConfig {
            timeout_ms: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let ok = BackendConfig {
            endpoint: Some("http://localhost:9".into()),
            ..BackendConfig::of_kind(BackendKind::Http)
        };
        assert!(ok.validate().is_ok());
        assert_eq!("Oracle".parse::<BackendKind>().unwrap(), BackendKind::Oracle);
        assert!("vlm".parse::<BackendKind>().is_err());
    }
}
