//! Failure-correction QA generation from recorded episodes.
//!
//! Gripper change events are located in each episode, a window of frames
//! leading up to every event is retained, and each retained frame is paired
//! with the correction that takes its action to the action at the next event.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::ActionVector;
use crate::codec::{build_prompt, compose_answer, discretize, CorrectionDelta, GripperEvent, Thresholds};
use crate::error::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSemantics {
    /// Actions are per-step end-effector deltas.
    #[serde(rename = "relative")]
    RelativeDelta,
    /// Actions are absolute end-effector poses.
    #[serde(rename = "absolute")]
    AbsolutePose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based timestep.
    pub t: u64,
    /// Opaque image reference; never decoded.
    pub image: String,
    pub action: ActionVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub instruction: String,
    pub action_semantics: ActionSemantics,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Step at 1-based index `t`.
    pub fn step(&self, t: u64) -> Option<&Step> {
        let idx = usize::try_from(t.checked_sub(1)?).ok()?;
        self.steps.get(idx)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.steps.len() < 2 {
            return Err(format!("needs at least 2 steps, has {}", self.steps.len()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let expected = i as u64 + 1;
            if step.t != expected {
                return Err(format!("step {} has t={}, expected {expected}", i + 1, step.t));
            }
            step.action
                .validate(false)
                .map_err(|e| format!("step t={}: {e}", step.t))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub t: u64,
    pub kind: GripperEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub episode_id: String,
    pub t: u64,
    pub c_star: u64,
    pub image: String,
    pub prompt: String,
    pub answer: String,
    /// Correction before binning, kept for auditing.
    pub delta: CorrectionDelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub delta_g: f64,
    pub window: u64,
    #[serde(skip)]
    pub thresholds: Thresholds,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            delta_g: 0.5,
            window: 3,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub episodes: usize,
    pub events: usize,
    pub records: usize,
    /// Retained frames with no change event at or after them.
    pub skips: usize,
}

impl GenerationReport {
    fn merge(mut self, other: &GenerationReport) -> Self {
        self.episodes += other.episodes;
        self.events += other.events;
        self.records += other.records;
        self.skips += other.skips;
        self
    }
}

/// Change events in a gripper sequence whose first element is timestep 1.
pub fn detect_changes_in(gripper: &[f64], delta_g: f64) -> Vec<ChangeEvent> {
    gripper
        .windows(2)
        .enumerate()
        .filter(|(_, w)| (w[1] - w[0]).abs() > delta_g)
        .map(|(i, w)| ChangeEvent {
            t: i as u64 + 2,
            kind: GripperEvent::from_transition(w[0], w[1]),
        })
        .collect()
}

pub fn detect_changes(episode: &Episode, delta_g: f64) -> Vec<ChangeEvent> {
    let gripper: Vec<f64> = episode.steps.iter().map(|s| s.action.g).collect();
    detect_changes_in(&gripper, delta_g)
}

/// Union of `{c - window, ..., c} ∩ [1, len]` over all events, ascending.
pub fn retained_frames(changes: &[ChangeEvent], window: u64, len: u64) -> Vec<u64> {
    let mut frames = BTreeSet::new();
    for c in changes {
        let lo = c.t.saturating_sub(window).max(1);
        let hi = c.t.min(len);
        frames.extend(lo..=hi);
    }
    frames.into_iter().collect()
}

/// The first event at or after `t` and the correction `a[c*] - a[t]` on
/// x, y, z and rz. `None` when no such event exists.
pub fn corrective_target(episode: &Episode, t: u64, changes: &[ChangeEvent]) -> Option<(ChangeEvent, CorrectionDelta)> {
    let target = *changes.iter().filter(|c| c.t >= t).min_by_key(|c| c.t)?;
    let current = episode.step(t)?.action;
    let goal = episode.step(target.t)?.action;
    // Relative and absolute actions share this arithmetic; only the meaning
    // of the difference changes.
    let delta = CorrectionDelta::new(
        goal.dx - current.dx,
        goal.dy - current.dy,
        goal.dz - current.dz,
        goal.drz - current.drz,
    );
    Some((target, delta))
}

pub fn generate(episode: &Episode, cfg: &GenerationConfig) -> Result<(Vec<QaRecord>, GenerationReport), DatasetError> {
    let fail = |message: String| DatasetError::Episode {
        id: episode.id.clone(),
        message,
    };
    episode.validate().map_err(fail)?;
    let changes = detect_changes(episode, cfg.delta_g);
    let frames = retained_frames(&changes, cfg.window, episode.len() as u64);

    let mut report = GenerationReport {
        episodes: 1,
        events: changes.len(),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(frames.len());
    for t in frames {
        let Some((target, delta)) = corrective_target(episode, t, &changes) else {
            report.skips += 1;
            continue;
        };
        let text = discretize(&delta, &cfg.thresholds).map_err(|e| fail(e.to_string()))?;
        let prompt = build_prompt(&episode.instruction, target.kind).map_err(|e| fail(e.to_string()))?;
        let step = episode.step(t).expect("retained frames lie inside the episode");
        records.push(QaRecord {
            episode_id: episode.id.clone(),
            t,
            c_star: target.t,
            image: step.image.clone(),
            prompt,
            answer: compose_answer(&text),
            delta,
        });
    }
    report.records = records.len();
    Ok((records, report))
}

/// Generates records for many episodes in parallel; output is sorted by
/// `(episode_id, t)` regardless of scheduling.
pub fn generate_all(
    episodes: &[Episode],
    cfg: &GenerationConfig,
) -> Result<(Vec<QaRecord>, GenerationReport), DatasetError> {
    let per_episode: Vec<_> = episodes
        .par_iter()
        .map(|e| generate(e, cfg))
        .collect::<Result<_, _>>()?;
    let mut report = GenerationReport::default();
    let mut records = Vec::new();
    for (recs, rep) in per_episode {
        report = report.merge(&rep);
        records.extend(recs);
    }
    records.sort_by(|a, b| a.episode_id.cmp(&b.episode_id).then(a.t.cmp(&b.t)));
    Ok((records, report))
}

/// Reads one episode per non-blank line.
pub fn read_episodes(path: &Path) -> Result<Vec<Episode>, DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut episodes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| DatasetError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let episode: Episode = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        episode.validate().map_err(schema)?;
        episodes.push(episode);
    }
    Ok(episodes)
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<usize, DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(items.len())
}

pub fn write_episodes(episodes: &[Episode], path: &Path) -> Result<usize, DatasetError> {
    write_jsonl(episodes, path)
}

pub fn write_records(records: &[QaRecord], path: &Path) -> Result<usize, DatasetError> {
    write_jsonl(records, path)
}

pub fn read_records(path: &Path) -> Result<Vec<QaRecord>, DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode_with_gripper(g: &[f64]) -> Episode {
        Episode {
            id: "ep".into(),
            instruction: "put the spoon in the pot".into(),
            action_semantics: ActionSemantics::RelativeDelta,
            steps: g
                .iter()
                .enumerate()
                .map(|(i, &g)| Step {
                    t: i as u64 + 1,
                    image: format!("img/{}.png", i + 1),
                    action: ActionVector {
                        g,
                        ..ActionVector::ZERO
                    },
                })
                .collect(),
        }
    }

    fn ts(events: &[ChangeEvent]) -> Vec<u64> {
        events.iter().map(|c| c.t).collect()
    }

    #[test]
    fn changes_on_fixture() {
        let ep = episode_with_gripper(&[0., 0., 0., 1., 1., 1., 0.]);
        let c = detect_changes(&ep, 0.5);
        assert_eq!(
            c,
            vec![
                ChangeEvent {
                    t: 4,
                    kind: GripperEvent::Close
                },
                ChangeEvent {
                    t: 7,
                    kind: GripperEvent::Open
                },
            ]
        );
    }

    #[test]
    fn constant_and_minimal() {
        assert!(detect_changes(&episode_with_gripper(&[1.0; 6]), 0.5).is_empty());
        assert_eq!(
            detect_changes(&episode_with_gripper(&[0.0, 1.0]), 0.5),
            vec![ChangeEvent {
                t: 2,
                kind: GripperEvent::Close
            }]
        );
        // strictly greater than the threshold
        assert!(detect_changes_in(&[0.0, 0.5], 0.5).is_empty());
    }

    #[test]
    fn retained_windows() {
        let ev = |t| ChangeEvent {
            t,
            kind: GripperEvent::Close,
        };
        assert_eq!(retained_frames(&[ev(4), ev(7)], 3, 7), (1..=7).collect::<Vec<_>>());
        assert_eq!(retained_frames(&[ev(2)], 3, 5), vec![1, 2]);
        assert!(retained_frames(&[], 3, 5).is_empty());
        assert_eq!(retained_frames(&[ev(4), ev(7)], 0, 7), vec![4, 7]);
        assert_eq!(retained_frames(&[ev(9), ev(10)], 1, 12), vec![8, 9, 10]);
    }

    #[test]
    fn target_selection() {
        let ep = episode_with_gripper(&[0., 0., 0., 1., 1., 1., 0.]);
        let c = detect_changes(&ep, 0.5);
        let (target, delta) = corrective_target(&ep, 4, &c).unwrap();
        assert_eq!(target.t, 4);
        assert_eq!(delta, CorrectionDelta::ZERO);
        assert_eq!(corrective_target(&ep, 5, &c).unwrap().0.t, 7);
        let only_first = [c[0]];
        assert!(corrective_target(&ep, 6, &only_first).is_none());
    }

    #[test]
    fn fixture_generation_trace() {
        let ep = episode_with_gripper(&[0., 0., 0., 1., 1., 1., 0.]);
        let (records, report) = generate(&ep, &GenerationConfig::default()).unwrap();
        assert_eq!(ts_of(&records), (1..=7).collect::<Vec<_>>());
        assert_eq!(
            report,
            GenerationReport {
                episodes: 1,
                events: 2,
                records: 7,
                skips: 0
            }
        );
        let approvals: Vec<u64> = records.iter().filter(|r| r.answer == "Yes.").map(|r| r.t).collect();
        // actions are zero on every pose axis, so every frame is an approval here
        assert_eq!(approvals, (1..=7).collect::<Vec<_>>());
        let c_star: Vec<u64> = records.iter().map(|r| r.c_star).collect();
        assert_eq!(c_star, vec![4, 4, 4, 4, 7, 7, 7]);
        assert!(records[0].prompt.contains("close its gripper"));
        assert!(records[5].prompt.contains("open its gripper"));
    }

    fn ts_of(records: &[QaRecord]) -> Vec<u64> {
        records.iter().map(|r| r.t).collect()
    }

    #[test]
    fn correction_answer_composition() {
        let mut ep = episode_with_gripper(&[0., 0., 0., 1., 1.]);
        ep.steps[1].action = ActionVector::new(0.01, 0.02, 0.0, 0.0, 0.0, 0.03, 0.0);
        ep.steps[3].action = ActionVector::new(0.06, 0.02, 0.2, 0.0, 0.0, 0.01, 1.0);
        let (records, _) = generate(&ep, &GenerationConfig::default()).unwrap();
        let r2 = records.iter().find(|r| r.t == 2).unwrap();
        assert_eq!(
            r2.answer,
            "No. Move forward. Small. Move up. Large. Rotate clockwise. Small."
        );
        assert_eq!(ts(&detect_changes(&ep, 0.5)), vec![4]);
    }

    #[test]
    fn constant_gripper_yields_nothing() {
        let (records, report) = generate(&episode_with_gripper(&[0.0; 5]), &GenerationConfig::default()).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.events, 0);
    }

    #[test]
    fn invalid_episode_rejected() {
        let mut ep = episode_with_gripper(&[0.0, 1.0, 0.0]);
        ep.steps[2].t = 5;
        assert!(generate(&ep, &GenerationConfig::default()).is_err());
        assert!(episode_with_gripper(&[0.0]).validate().is_err());
    }

    #[test]
    fn merge_order_is_by_episode_then_t() {
        let mut a = episode_with_gripper(&[0., 1., 1., 0.]);
        a.id = "b".into();
        let mut b = episode_with_gripper(&[0., 0., 1.]);
        b.id = "a".into();
        let (records, report) = generate_all(&[a, b], &GenerationConfig::default()).unwrap();
        let keys: Vec<_> = records.iter().map(|r| (r.episode_id.as_str(), r.t)).collect();
        assert_eq!(
            keys,
            vec![("a", 1), ("a", 2), ("a", 3), ("b", 1), ("b", 2), ("b", 3), ("b", 4)]
        );
        assert_eq!(report.episodes, 2);
    }
}
