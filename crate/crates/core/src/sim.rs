//! Seeded kinematic pick-and-place world with a scripted expert standing in
//! for a learned chunking policy.
//!
//! There are no dynamics or contacts. Closing the gripper grasps the nearest
//! free object only when both the position and yaw tolerances are met, which
//! isolates exactly the failure a keyframe supervisor is meant to catch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{ActionVector, PredictionBuffer, PredictionChunk, DEFAULT_HORIZON};
use crate::backends::{build_supervisor, BackendConfig, OracleSpec};
use crate::codec::Thresholds;
use crate::dataset::{ActionSemantics, Episode, Step};
use crate::error::{BackendError, SimError};
use crate::fusion::{fuse, FusionParams};
use crate::runtime::{supervise_step, ImageRef, LoopState, Supervisor};

/// Positions closer than this count as reached.
const REACHED: f64 = 1e-9;
const SPAWN_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rz: f64,
}

impl Pose {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance_to(&self, p: &[f64; 3]) -> f64 {
        ((self.x - p[0]).powi(2) + (self.y - p[1]).powi(2) + (self.z - p[2]).powi(2)).sqrt()
    }

    fn with_position(self, p: [f64; 3]) -> Pose {
        Pose {
            x: p[0],
            y: p[1],
            z: p[2],
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Workspace {
    fn default() -> Self {
        Workspace {
            min: [0.2, -0.35, 0.0],
            max: [0.8, 0.35, 0.45],
        }
    }
}

impl Workspace {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
            p[2].clamp(self.min[2], self.max[2]),
        ]
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Applies the translational and yaw parts of `action`, clamped to the
/// workspace. Rotations about x and y are ignored.
pub fn integrate(pose: &Pose, action: &ActionVector, ws: &Workspace) -> Pose {
    let p = ws.clamp([pose.x + action.dx, pose.y + action.dy, pose.z + action.dz]);
    Pose {
        x: p[0],
        y: p[1],
        z: p[2],
        rz: wrap_angle(pose.rz + action.drz),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub position: [f64; 3],
    pub yaw: f64,
    pub held: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRegion {
    pub center: [f64; 3],
    pub radius: f64,
}

impl TargetRegion {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        let d: f64 = (0..3).map(|i| (p[i] - self.center[i]).powi(2)).sum();
        d.sqrt() <= self.radius
    }
}

/// Object and target indices are their ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub gripper_pose: Pose,
    pub gripper_closed: bool,
    pub objects: Vec<SimObject>,
    pub targets: Vec<TargetRegion>,
    pub tick: u64,
}

impl SimState {
    pub fn held_object(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }

    pub fn digest(&self) -> StateDigest {
        StateDigest {
            gripper_pose: self.gripper_pose,
            gripper_closed: self.gripper_closed,
            held: self.held_object(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateDigest {
    pub gripper_pose: Pose,
    pub gripper_closed: bool,
    pub held: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub object: usize,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SimEvent {
    Grasp { object: usize },
    GraspMiss,
    Release { object: usize },
    Place { object: usize, target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceMode {
    None,
    /// The policy's perceived object and target locations are shifted by one
    /// axis-aligned offset for the whole episode, so every approach that ends
    /// in a gripper transition lands off target.
    Keyframe,
    /// Gaussian noise on the translational part of every predicted step.
    PerStep,
}

impl std::str::FromStr for DisturbanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(DisturbanceMode::None),
            "keyframe" => Ok(DisturbanceMode::Keyframe),
            "perstep" | "per-step" | "per_step" => Ok(DisturbanceMode::PerStep),
            other => Err(format!("unknown disturbance mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Disturbance {
    pub mode: DisturbanceMode,
    /// Per-episode amplitude is drawn uniformly from `[lo, hi]` meters.
    pub amplitude: [f64; 2],
}

impl Default for Disturbance {
    fn default() -> Self {
        Disturbance {
            mode: DisturbanceMode::None,
            amplitude: [0.01, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub yaw: [f64; 2],
}

impl SpawnRange {
    fn sample(&self, rng: &mut impl Rng) -> ([f64; 3], f64) {
        let p = [
            uniform(rng, self.min[0], self.max[0]),
            uniform(rng, self.min[1], self.max[1]),
            uniform(rng, self.min[2], self.max[2]),
        ];
        (p, uniform(rng, self.yaw[0], self.yaw[1]))
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    #[serde(skip)]
    pub seed: u64,
    pub instruction: String,
    pub workspace: Workspace,
    pub gripper_start: Pose,
    pub object_spawn: SpawnRange,
    pub target_spawn: SpawnRange,
    pub target_radius: f64,
    /// Minimum horizontal distance between the task object and the target
    /// centre at spawn.
    pub min_separation: f64,
    /// Extra objects that are not part of the task.
    pub distractors: usize,
    /// Meters.
    pub grasp_tolerance: f64,
    /// Radians.
    pub yaw_tolerance: f64,
    pub disturbance: Disturbance,
    pub max_steps: u64,
    pub horizon: usize,
    /// Meters per step.
    pub max_speed: f64,
    /// Radians per step.
    pub max_yaw_speed: f64,
    pub hover_height: f64,
    pub carry_height: f64,
    pub binary_gripper: bool,
    pub delta_g: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 0,
            instruction: "pick up the block and place it in the bowl".to_string(),
            workspace: Workspace::default(),
            gripper_start: Pose {
                x: 0.5,
                y: 0.0,
                z: 0.3,
                rz: 0.0,
            },
            object_spawn: SpawnRange {
                min: [0.35, -0.2, 0.12],
                max: [0.65, 0.2, 0.12],
                yaw: [-0.5, 0.5],
            },
            target_spawn: SpawnRange {
                min: [0.35, -0.2, 0.12],
                max: [0.65, 0.2, 0.12],
                yaw: [0.0, 0.0],
            },
            target_radius: 0.05,
            min_separation: 0.1,
            distractors: 0,
            grasp_tolerance: 0.02,
            yaw_tolerance: 0.1,
            disturbance: Disturbance::default(),
            max_steps: 200,
            horizon: DEFAULT_HORIZON,
            max_speed: 0.05,
            max_yaw_speed: 0.2,
            hover_height: 0.08,
            carry_height: 0.25,
            binary_gripper: true,
            delta_g: 0.5,
        }
    }
}

impl Scenario {
    pub fn task(&self) -> TaskSpec {
        TaskSpec { object: 0, target: 0 }
    }

    pub fn oracle_spec(&self) -> OracleSpec {
        OracleSpec {
            task: self.task(),
            workspace: self.workspace,
            grasp_tolerance: self.grasp_tolerance,
            yaw_tolerance: self.yaw_tolerance,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Scenario {
        Scenario { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        let ws = &self.workspace;
        if (0..3).any(|i| ws.min[i].partial_cmp(&ws.max[i]) != Some(std::cmp::Ordering::Less)) {
            return bad("workspace min must be below max on every axis".into());
        }
        if !ws.contains(&self.gripper_start.position()) {
            return bad("gripper start lies outside the workspace".into());
        }
        for (name, range) in [("object", &self.object_spawn), ("target", &self.target_spawn)] {
            if (0..3).any(|i| range.min[i] > range.max[i]) || range.yaw[0] > range.yaw[1] {
                return bad(format!("{name} spawn range is inverted"));
            }
            if !ws.contains(&range.min) || !ws.contains(&range.max) {
                return bad(format!("{name} spawn range exceeds the workspace"));
            }
        }
        let positive = [
            ("grasp_tolerance", self.grasp_tolerance),
            ("yaw_tolerance", self.yaw_tolerance),
            ("target_radius", self.target_radius),
            ("max_speed", self.max_speed),
            ("max_yaw_speed", self.max_yaw_speed),
            ("delta_g", self.delta_g),
        ];
        if self.min_separation.is_nan() || self.min_separation < 0.0 {
            return bad("min_separation must be >= 0".into());
        }
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        let [lo, hi] = self.disturbance.amplitude;
        if !(0.0 <= lo && lo <= hi && hi <= 0.2) {
            return bad(format!("disturbance amplitude [{lo}, {hi}] must lie within [0, 0.2]"));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if self.instruction.trim().is_empty() {
            return bad("instruction must not be empty".into());
        }
        Ok(())
    }
}

fn world_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn policy_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Initial state for `scenario.seed`.
pub fn reset(scenario: &Scenario) -> Result<SimState, SimError> {
    scenario.validate()?;
    let mut rng = world_rng(scenario.seed);
    let objects: Vec<SimObject> = (0..=scenario.distractors)
        .map(|_| {
            let (position, yaw) = scenario.object_spawn.sample(&mut rng);
            SimObject {
                position,
                yaw,
                held: false,
            }
        })
        .collect();
    let task = &objects[0];
    let mut center = None;
    for _ in 0..SPAWN_ATTEMPTS {
        let (c, _) = scenario.target_spawn.sample(&mut rng);
        if (c[0] - task.position[0]).hypot(c[1] - task.position[1]) >= scenario.min_separation {
            center = Some(c);
            break;
        }
    }
    let center = center.ok_or_else(|| SimError::Config("target spawn range cannot satisfy min_separation".into()))?;
    Ok(SimState {
        gripper_pose: scenario.gripper_start,
        gripper_closed: false,
        objects,
        targets: vec![TargetRegion {
            center,
            radius: scenario.target_radius,
        }],
        tick: 0,
    })
}

/// Advances the world by one action: motion first, then the gripper command.
pub fn step(state: &SimState, action: &ActionVector, scenario: &Scenario) -> (SimState, Vec<SimEvent>) {
    let mut next = state.clone();
    let mut events = Vec::new();
    next.gripper_pose = integrate(&state.gripper_pose, action, &scenario.workspace);
    let pose = next.gripper_pose;
    if let Some(i) = next.held_object() {
        next.objects[i].position = pose.position();
        next.objects[i].yaw = pose.rz;
    }

    let close = action.g >= 0.5;
    if close && !next.gripper_closed {
        next.gripper_closed = true;
        let candidate = next
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| {
                pose.distance_to(&o.position) <= scenario.grasp_tolerance
                    && wrap_angle(o.yaw - pose.rz).abs() <= scenario.yaw_tolerance
            })
            .min_by(|(_, a), (_, b)| pose.distance_to(&a.position).total_cmp(&pose.distance_to(&b.position)))
            .map(|(i, _)| i);
        match candidate {
            Some(i) => {
                let o = &mut next.objects[i];
                o.held = true;
                o.position = pose.position();
                o.yaw = pose.rz;
                events.push(SimEvent::Grasp { object: i });
            }
            None => events.push(SimEvent::GraspMiss),
        }
    } else if !close && next.gripper_closed {
        next.gripper_closed = false;
        if let Some(i) = next.held_object() {
            next.objects[i].held = false;
            events.push(SimEvent::Release { object: i });
            let position = next.objects[i].position;
            if let Some(t) = next.targets.iter().position(|t| t.contains(&position)) {
                events.push(SimEvent::Place { object: i, target: t });
            }
        }
    }
    next.tick += 1;
    (next, events)
}

/// Scripted stand-in for a learned policy: approach, descend, close, lift,
/// transport, open, re-planned from the observed state every call.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    scenario: Scenario,
    belief_offset: [f64; 3],
    noise: Option<Normal<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct PlanState {
    pose: Pose,
    closed: bool,
    holding: bool,
    done: bool,
}

impl ExpertPolicy {
    /// Draws this episode's disturbance from `rng`.
    pub fn new(scenario: &Scenario, rng: &mut impl Rng) -> Self {
        let d = scenario.disturbance;
        let mut belief_offset = [0.0; 3];
        let mut noise = None;
        match d.mode {
            DisturbanceMode::None => {}
            DisturbanceMode::Keyframe => {
                let magnitude = uniform(rng, d.amplitude[0], d.amplitude[1]);
                let axis = rng.random_range(0..3usize);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                belief_offset[axis] = sign * magnitude;
            }
            DisturbanceMode::PerStep => {
                let sigma = uniform(rng, d.amplitude[0], d.amplitude[1]);
                noise = Normal::new(0.0, sigma).ok();
            }
        }
        ExpertPolicy {
            scenario: scenario.clone(),
            belief_offset,
            noise,
        }
    }

    pub fn belief_offset(&self) -> [f64; 3] {
        self.belief_offset
    }

    fn perceived(&self, p: &[f64; 3]) -> [f64; 3] {
        let o = self.belief_offset;
        self.scenario.workspace.clamp([p[0] + o[0], p[1] + o[1], p[2] + o[2]])
    }

    fn toward(&self, pose: &Pose, goal: &Pose, g: f64) -> ActionVector {
        let d = [goal.x - pose.x, goal.y - pose.y, goal.z - pose.z];
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let scale = if dist > self.scenario.max_speed {
            self.scenario.max_speed / dist
        } else {
            1.0
        };
        let yaw = wrap_angle(goal.rz - pose.rz);
        let drz = yaw.clamp(-self.scenario.max_yaw_speed, self.scenario.max_yaw_speed);
        ActionVector::new(d[0] * scale, d[1] * scale, d[2] * scale, 0.0, 0.0, drz, g)
    }

    fn hold(g: f64) -> ActionVector {
        ActionVector {
            g,
            ..ActionVector::ZERO
        }
    }

    fn plan(&self, ps: &PlanState, object: &SimObject, target: &TargetRegion) -> ActionVector {
        let s = &self.scenario;
        let pose = ps.pose;
        let xy_reached = |p: &[f64; 3]| ((pose.x - p[0]).powi(2) + (pose.y - p[1]).powi(2)).sqrt() <= REACHED;
        if ps.done {
            return Self::hold(0.0);
        }
        if ps.closed && !ps.holding {
            return Self::hold(0.0);
        }
        if ps.holding {
            let place = self.perceived(&target.center);
            if pose.distance_to(&place) <= REACHED {
                return Self::hold(0.0);
            }
            let goal = pose.with_position(place);
            if xy_reached(&place) {
                return self.toward(&pose, &goal, 1.0);
            }
            let carry = s.carry_height.clamp(s.workspace.min[2], s.workspace.max[2]);
            if pose.z < carry - REACHED {
                return self.toward(&pose, &pose.with_position([pose.x, pose.y, carry]), 1.0);
            }
            return self.toward(&pose, &pose.with_position([place[0], place[1], carry]), 1.0);
        }
        let grasp_at = self.perceived(&object.position);
        let yaw_error = wrap_angle(object.yaw - pose.rz).abs();
        if pose.distance_to(&grasp_at) <= REACHED && yaw_error <= REACHED {
            return Self::hold(1.0);
        }
        let grasp = Pose {
            x: grasp_at[0],
            y: grasp_at[1],
            z: grasp_at[2],
            rz: object.yaw,
        };
        if xy_reached(&grasp_at) && yaw_error <= REACHED {
            return self.toward(&pose, &grasp, 0.0);
        }
        let above = s
            .workspace
            .clamp([grasp_at[0], grasp_at[1], grasp_at[2] + s.hover_height]);
        self.toward(&pose, &grasp.with_position(above), 0.0)
    }

    fn task_done(&self, state: &SimState) -> bool {
        let task = self.scenario.task();
        let object = &state.objects[task.object];
        !object.held && state.targets[task.target].contains(&object.position)
    }

    /// Predicts the next `horizon` actions from `state`, assuming its own
    /// grasps and releases succeed.
    pub fn chunk(&self, state: &SimState, issued_at: u64, rng: &mut impl Rng) -> PredictionChunk {
        let task = self.scenario.task();
        let mut object = state.objects[task.object].clone();
        let target = state.targets[task.target];
        let mut ps = PlanState {
            pose: state.gripper_pose,
            closed: state.gripper_closed,
            holding: object.held,
            done: self.task_done(state),
        };
        let mut actions = Vec::with_capacity(self.scenario.horizon);
        for _ in 0..self.scenario.horizon {
            let planned = self.plan(&ps, &object, &target);
            ps.pose = integrate(&ps.pose, &planned, &self.scenario.workspace);
            let close = planned.g >= 0.5;
            if close && !ps.closed {
                ps.closed = true;
                ps.holding = true;
            } else if !close && ps.closed {
                ps.closed = false;
                if ps.holding {
                    ps.holding = false;
                    ps.done = true;
                }
            }
            if ps.holding {
                object.position = ps.pose.position();
            }
            let mut emitted = planned;
            if let Some(noise) = &self.noise {
                emitted.dx += noise.sample(rng);
                emitted.dy += noise.sample(rng);
                emitted.dz += noise.sample(rng);
            }
            actions.push(emitted);
        }
        PredictionChunk::new(issued_at, actions).expect("expert actions are finite")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub action: ActionVector,
    pub state: StateDigest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub grasp_success: bool,
    pub task_success: bool,
    pub steps: u64,
    pub supervisor_calls: u64,
    pub corrections_applied: u64,
    /// Keyframes whose query failed or whose reply did not parse.
    pub malformed: u64,
    /// Policy perception offset for this episode (zero unless keyframe mode).
    pub disturbance: [f64; 3],
    /// Executed action and resulting state, one entry per step.
    pub executed_trace: Vec<TraceEntry>,
}

impl EpisodeResult {
    /// Executed gripper commands, one per step.
    pub fn gripper_trace(&self) -> Vec<f64> {
        self.executed_trace.iter().map(|e| e.action.g).collect()
    }

    /// Exports the executed trace as a dataset episode with relative actions.
    pub fn to_episode(&self, id: &str, instruction: &str) -> Episode {
        Episode {
            id: id.to_string(),
            instruction: instruction.to_string(),
            action_semantics: ActionSemantics::RelativeDelta,
            steps: self
                .executed_trace
                .iter()
                .enumerate()
                .map(|(i, e)| Step {
                    t: i as u64 + 1,
                    image: format!("sim://{}/{}", self.seed, i + 1),
                    action: e.action,
                })
                .collect(),
        }
    }
}

/// Runs one closed-loop episode with a caller-supplied supervisor.
pub fn run_episode_with(
    scenario: &Scenario,
    fusion: &FusionParams,
    thresholds: &Thresholds,
    mut supervisor: Option<&mut (dyn Supervisor + '_)>,
) -> Result<EpisodeResult, SimError> {
    fusion.validate(scenario.horizon)?;
    let mut state = reset(scenario)?;
    let mut rng = policy_rng(scenario.seed);
    let policy = ExpertPolicy::new(scenario, &mut rng);
    let mut buffer = PredictionBuffer::new(fusion.n, scenario.horizon)?;
    let mut loop_state = LoopState::new(scenario.delta_g);
    let task = scenario.task();

    let mut result = EpisodeResult {
        seed: scenario.seed,
        grasp_success: false,
        task_success: false,
        steps: 0,
        supervisor_calls: 0,
        corrections_applied: 0,
        malformed: 0,
        disturbance: policy.belief_offset(),
        executed_trace: Vec::new(),
    };

    for t in 0..scenario.max_steps {
        buffer.push_chunk(policy.chunk(&state, t, &mut rng))?;
        let aligned = buffer.aligned_predictions(t, fusion.n)?;
        let fused = fuse(&aligned.actions, fusion)?.fused;
        let proposed = if scenario.binary_gripper {
            fused.with_binary_gripper()
        } else {
            fused
        };
        let outcome = supervise_step(
            &proposed,
            ImageRef::None,
            &scenario.instruction,
            t,
            &mut loop_state,
            thresholds,
            supervisor.as_deref_mut(),
            Some(&state),
        );
        let (next, events) = step(&state, &outcome.action, scenario);
        state = next;
        result.executed_trace.push(TraceEntry {
            action: outcome.action,
            state: state.digest(),
        });
        for e in &events {
            match *e {
                SimEvent::Grasp { object } if object == task.object => result.grasp_success = true,
                SimEvent::Place { object, target } if object == task.object && target == task.target => {
                    result.task_success = true
                }
                _ => {}
            }
        }
        if result.task_success {
            break;
        }
    }

    result.steps = loop_state.stats.steps;
    result.supervisor_calls = loop_state.stats.calls;
    result.corrections_applied = loop_state.stats.corrections;
    result.malformed = loop_state.stats.malformed;
    Ok(result)
}

/// Runs one closed-loop episode, building the supervisor from `backend`.
pub fn run_episode(
    scenario: &Scenario,
    fusion: &FusionParams,
    thresholds: &Thresholds,
    backend: &BackendConfig,
) -> Result<EpisodeResult, SimError> {
    let mut supervisor =
        build_supervisor(backend, scenario.oracle_spec(), *thresholds).map_err(|e| SimError::Config(e.to_string()))?;
    let sup = supervisor.as_mut().map(|b| b.as_mut() as &mut dyn Supervisor);
    run_episode_with(scenario, fusion, thresholds, sup)
}

/// Per-episode seeds derived from one base seed.
pub fn derive_seeds(base: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..n).map(|_| rng.random()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: String,
    pub episodes: usize,
    pub grasp_rate: f64,
    pub task_rate: f64,
    pub mean_supervisor_calls: f64,
    pub mean_corrections: f64,
    pub malformed_responses: u64,
}

impl VariantMetrics {
    pub fn from_results(variant: &str, results: &[EpisodeResult]) -> Self {
        let n = results.len().max(1) as f64;
        let count = |f: fn(&EpisodeResult) -> bool| results.iter().filter(|r| f(r)).count() as f64;
        VariantMetrics {
            variant: variant.to_string(),
            episodes: results.len(),
            grasp_rate: count(|r| r.grasp_success) / n,
            task_rate: count(|r| r.task_success) / n,
            mean_supervisor_calls: results.iter().map(|r| r.supervisor_calls as f64).sum::<f64>() / n,
            mean_corrections: results.iter().map(|r| r.corrections_applied as f64).sum::<f64>() / n,
            malformed_responses: results.iter().map(|r| r.malformed).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<VariantMetrics>,
}

impl MetricsTable {
    pub fn row(&self, variant: &str) -> Option<&VariantMetrics> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let header = [
            "variant",
            "episodes",
            "grasp %",
            "task %",
            "calls/ep",
            "corr/ep",
            "malformed",
        ];
        let rows: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    r.episodes.to_string(),
                    format!("{:.1}", 100.0 * r.grasp_rate),
                    format!("{:.1}", 100.0 * r.task_rate),
                    format!("{:.2}", r.mean_supervisor_calls),
                    format!("{:.2}", r.mean_corrections),
                    r.malformed_responses.to_string(),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..7)
            .map(|i| {
                rows.iter()
                    .map(|r| r[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = line(header.to_vec());
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub table: MetricsTable,
    /// Per variant, results in seed order.
    pub results: Vec<Vec<EpisodeResult>>,
}

/// Runs every variant on the same seed list. `jobs` sets the worker count;
/// results do not depend on it.
pub fn evaluate(
    template: &Scenario,
    seeds: &[u64],
    variants: &[Variant],
    fusion: &FusionParams,
    thresholds: &Thresholds,
    jobs: usize,
) -> Result<Evaluation, SimError> {
    for v in variants {
        v.backend
            .validate()
            .map_err(|e| SimError::Config(format!("{}: {e}", v.name)))?;
    }
    let names: Vec<String> = variants.iter().map(|v| v.name.clone()).collect();
    let oracle = template.oracle_spec();
    evaluate_with(template, seeds, &names, fusion, thresholds, jobs, |i| {
        build_supervisor(&variants[i].backend, oracle, *thresholds)
    })
}

/// Like [`evaluate`], but each episode's supervisor comes from
/// `make(variant_index)`.
pub fn evaluate_with<F>(
    template: &Scenario,
    seeds: &[u64],
    names: &[String],
    fusion: &FusionParams,
    thresholds: &Thresholds,
    jobs: usize,
    make: F,
) -> Result<Evaluation, SimError>
where
    F: Fn(usize) -> Result<Option<Box<dyn Supervisor + Send>>, BackendError> + Sync,
{
    if seeds.is_empty() {
        return Err(SimError::Config("need at least one episode".into()));
    }
    template.validate()?;
    fusion.validate(template.horizon)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| SimError::Config(e.to_string()))?;
    let episode = |i: usize, seed: u64| {
        let mut sup = make(i).map_err(|e| SimError::Config(format!("{}: {e}", names[i])))?;
        let sup = sup.as_mut().map(|b| b.as_mut() as &mut dyn Supervisor);
        run_episode_with(&template.with_seed(seed), fusion, thresholds, sup)
    };
    let results: Vec<Vec<EpisodeResult>> = pool.install(|| {
        (0..names.len())
            .map(|i| {
                seeds
                    .par_iter()
                    .map(|&seed| episode(i, seed))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let rows = names
        .iter()
        .zip(&results)
        .map(|(n, r)| VariantMetrics::from_results(n, r))
        .collect();
    Ok(Evaluation {
        table: MetricsTable { rows },
        results,
    })
}
