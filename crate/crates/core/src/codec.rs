//! Translation between continuous corrections and the two-bin natural
//! language correction grammar, plus supervisor prompt assembly.
//!
//! Directions are expressed in the robot base frame:
//!
//! | axis | +                | -         |
//! |------|------------------|-----------|
//! | x    | forward          | backward  |
//! | y    | left             | right     |
//! | z    | up               | down      |
//! | rz   | counterclockwise | clockwise |

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::CodecError;

/// Version tag of the bundled prompt template.
pub const PROMPT_TEMPLATE_VERSION: &str = "v1";
const PROMPT_TEMPLATE: &str = include_str!("../resources/prompt_v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// At or below this magnitude an axis needs no correction.
    pub small: f64,
    /// Above this magnitude an axis is binned Large.
    pub large: f64,
    /// Step applied when parsing a Small correction.
    pub step_small: f64,
    /// Step applied when parsing a Large correction.
    pub step_large: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            small: 0.01,
            large: 0.1,
            step_small: 0.01,
            step_large: 0.1,
        }
    }
}

impl Thresholds {
    /// Same bins, but a Small correction steps to the middle of its bin and
    /// a Large one to 1.5x the upper threshold.
    pub fn with_midpoint_steps(self) -> Self {
        Thresholds {
            step_small: 0.5 * (self.small + self.large),
            step_large: 1.5 * self.large,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let all = [self.small, self.large, self.step_small, self.step_large];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::Thresholds("values must be finite".into()));
        }
        if !(0.0 < self.small && self.small < self.large) {
            return Err(CodecError::Thresholds(format!(
                "need 0 < small < large, got small={} large={}",
                self.small, self.large
            )));
        }
        if !(0.0 < self.step_small && self.step_small <= self.step_large) {
            return Err(CodecError::Thresholds(format!(
                "need 0 < step_small <= step_large, got {} and {}",
                self.step_small, self.step_large
            )));
        }
        Ok(())
    }

    pub fn step(&self, magnitude: Magnitude) -> f64 {
        match magnitude {
            Magnitude::Small => self.step_small,
            Magnitude::Large => self.step_large,
        }
    }

    /// Bin for a correction of size `value`, or `None` below `small`.
    pub fn bin(&self, value: f64) -> Option<Magnitude> {
        let m = value.abs();
        if m <= self.small {
            None
        } else if m <= self.large {
            Some(Magnitude::Small)
        } else {
            Some(Magnitude::Large)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
    Rz,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::X, Axis::Y, Axis::Z, Axis::Rz];

    pub fn direction(self, positive: bool) -> Direction {
        match (self, positive) {
            (Axis::X, true) => Direction::Forward,
            (Axis::X, false) => Direction::Backward,
            (Axis::Y, true) => Direction::Left,
            (Axis::Y, false) => Direction::Right,
            (Axis::Z, true) => Direction::Up,
            (Axis::Z, false) => Direction::Down,
            (Axis::Rz, true) => Direction::Counterclockwise,
            (Axis::Rz, false) => Direction::Clockwise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
    Left,
    Right,
    Up,
    Down,
    Clockwise,
    Counterclockwise,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::Forward,
        Direction::Backward,
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
        Direction::Clockwise,
        Direction::Counterclockwise,
    ];

    pub fn axis(self) -> Axis {
        match self {
            Direction::Forward | Direction::Backward => Axis::X,
            Direction::Left | Direction::Right => Axis::Y,
            Direction::Up | Direction::Down => Axis::Z,
            Direction::Clockwise | Direction::Counterclockwise => Axis::Rz,
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward | Direction::Left | Direction::Up | Direction::Counterclockwise => 1.0,
            _ => -1.0,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Clockwise => "clockwise",
            Direction::Counterclockwise => "counterclockwise",
        }
    }

    fn from_word(word: &str) -> Option<Direction> {
        Direction::ALL.into_iter().find(|d| d.word() == word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Magnitude {
    Small,
    Large,
}

impl Magnitude {
    pub fn word(self) -> &'static str {
        match self {
            Magnitude::Small => "Small",
            Magnitude::Large => "Large",
        }
    }
}

/// The gripper transition a supervisor query is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperEvent {
    Close,
    Open,
}

impl GripperEvent {
    /// Close when the gripper value rises, Open otherwise.
    pub fn from_transition(previous: f64, current: f64) -> Self {
        if current > previous {
            GripperEvent::Close
        } else {
            GripperEvent::Open
        }
    }

    pub fn verb(self) -> &'static str {
        match self {
            GripperEvent::Close => "close",
            GripperEvent::Open => "open",
        }
    }
}

impl fmt::Display for GripperEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.verb())
    }
}

/// Translation (meters) and yaw (radians) correction. Rotations about x and
/// y are not expressible in the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct CorrectionDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub drz: f64,
}

impl CorrectionDelta {
    pub const ZERO: CorrectionDelta = CorrectionDelta {
        dx: 0.0,
        dy: 0.0,
        dz: 0.0,
        drz: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dz: f64, drz: f64) -> Self {
        CorrectionDelta { dx, dy, dz, drz }
    }

    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.dx,
            Axis::Y => self.dy,
            Axis::Z => self.dz,
            Axis::Rz => self.drz,
        }
    }

    pub fn set(&mut self, axis: Axis, value: f64) {
        match axis {
            Axis::X => self.dx = value,
            Axis::Y => self.dy = value,
            Axis::Z => self.dz = value,
            Axis::Rz => self.drz = value,
        }
    }

    pub fn is_zero(&self) -> bool {
        Axis::ALL.iter().all(|a| self.get(*a) == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        Axis::ALL.iter().all(|a| self.get(*a).is_finite())
    }
}

impl From<CorrectionDelta> for [f64; 4] {
    fn from(d: CorrectionDelta) -> Self {
        [d.dx, d.dy, d.dz, d.drz]
    }
}

impl From<[f64; 4]> for CorrectionDelta {
    fn from(v: [f64; 4]) -> Self {
        CorrectionDelta::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clause {
    pub axis: Axis,
    pub direction: Direction,
    pub magnitude: Magnitude,
}

/// Ordered clauses (x, y, z, rz), at most one per axis.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorrectionText {
    clauses: Vec<Clause>,
}

impl CorrectionText {
    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    /// Builds a text from `(direction, magnitude)` pairs, ordering them by
    /// axis. Duplicate axes keep the last entry.
    pub fn from_pairs(pairs: &[(Direction, Magnitude)]) -> Self {
        let mut slots: [Option<Clause>; 4] = [None; 4];
        for &(direction, magnitude) in pairs {
            let axis = direction.axis();
            slots[axis as usize] = Some(Clause {
                axis,
                direction,
                magnitude,
            });
        }
        CorrectionText {
            clauses: slots.into_iter().flatten().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Approve,
    Correct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCorrection {
    pub verdict: Verdict,
    pub delta: CorrectionDelta,
    pub raw_text: String,
}

impl ParsedCorrection {
    pub fn approve(raw_text: impl Into<String>) -> Self {
        ParsedCorrection {
            verdict: Verdict::Approve,
            delta: CorrectionDelta::ZERO,
            raw_text: raw_text.into(),
        }
    }
}

/// Bins each axis of `delta` into a clause.
pub fn discretize(delta: &CorrectionDelta, th: &Thresholds) -> Result<CorrectionText, CodecError> {
    if !delta.is_finite() {
        return Err(CodecError::NonFinite);
    }
    let clauses = Axis::ALL
        .iter()
        .filter_map(|&axis| {
            let v = delta.get(axis);
            th.bin(v).map(|magnitude| Clause {
                axis,
                direction: axis.direction(v > 0.0),
                magnitude,
            })
        })
        .collect();
    Ok(CorrectionText { clauses })
}

/// Renders `"Yes."` for an empty text, otherwise `"No."` followed by one
/// `Move <dir>. <Mag>.` or `Rotate <dir>. <Mag>.` pair per clause.
pub fn compose_answer(text: &CorrectionText) -> String {
    if text.is_empty() {
        return "Yes.".to_string();
    }
    let mut out = String::from("No.");
    for clause in &text.clauses {
        let verb = if clause.axis == Axis::Rz { "Rotate" } else { "Move" };
        out.push_str(&format!(
            " {verb} {}. {}.",
            clause.direction.word(),
            clause.magnitude.word()
        ));
    }
    out
}

/// Three-part supervisor prompt: task requirements, answer limitations and
/// example responses.
pub fn build_prompt(instruction: &str, event: GripperEvent) -> Result<String, CodecError> {
    let task = instruction.trim();
    let task = task.strip_suffix('.').unwrap_or(task).trim_end();
    if task.is_empty() {
        return Err(CodecError::EmptyInstruction);
    }
    Ok(PROMPT_TEMPLATE
        .trim_end()
        .replace("{instruction}", task)
        .replace("{verb}", event.verb()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    word: String,
    position: usize,
}

fn normalize(text: &str) -> String {
    let mut s = text.to_lowercase();
    for variant in [
        "counter-clockwise",
        "counter clockwise",
        "anti-clockwise",
        "anticlockwise",
    ] {
        s = s.replace(variant, "counterclockwise");
    }
    s
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if current.is_empty() {
                start = i;
            }
            current.push(c);
        } else if !current.is_empty() {
            tokens.push(Token {
                word: std::mem::take(&mut current),
                position: start,
            });
        }
    }
    if !current.is_empty() {
        tokens.push(Token {
            word: current,
            position: start,
        });
    }
    tokens
}

fn leading_verdict(tokens: &[Token], text: &str) -> Result<Verdict, CodecError> {
    match tokens.first().map(|t| t.word.as_str()) {
        Some("yes") => Ok(Verdict::Approve),
        Some("no") => Ok(Verdict::Correct),
        _ => Err(CodecError::Malformed(text.to_string())),
    }
}

/// Lenient parse: scans for direction tokens after a leading `No`, each
/// optionally followed by `small` or `large` (default small). A later
/// mention of an axis overrides an earlier one; other words are ignored.
pub fn parse_response(text: &str, th: &Thresholds) -> Result<ParsedCorrection, CodecError> {
    if text.trim().is_empty() {
        return Err(CodecError::EmptyResponse);
    }
    let normalized = normalize(text);
    let tokens = tokenize(&normalized);
    if leading_verdict(&tokens, text)? == Verdict::Approve {
        return Ok(ParsedCorrection::approve(text));
    }

    let mut delta = CorrectionDelta::ZERO;
    let mut pending: Option<Direction> = None;
    let settle = |delta: &mut CorrectionDelta, d: Direction, m: Magnitude| {
        delta.set(d.axis(), d.sign() * th.step(m));
    };
    for token in &tokens[1..] {
        if let Some(d) = Direction::from_word(&token.word) {
            if let Some(prev) = pending.replace(d) {
                settle(&mut delta, prev, Magnitude::Small);
            }
            continue;
        }
        let magnitude = match token.word.as_str() {
            "small" => Magnitude::Small,
            "large" => Magnitude::Large,
            _ => continue,
        };
        if let Some(d) = pending.take() {
            settle(&mut delta, d, magnitude);
        }
    }
    if let Some(d) = pending {
        settle(&mut delta, d, Magnitude::Small);
    }
    Ok(ParsedCorrection {
        verdict: Verdict::Correct,
        delta,
        raw_text: text.to_string(),
    })
}

/// Strict parse: accepts exactly the canonical form produced by
/// [`compose_answer`], up to whitespace.
pub fn parse_response_strict(text: &str, th: &Thresholds) -> Result<ParsedCorrection, CodecError> {
    if text.trim().is_empty() {
        return Err(CodecError::EmptyResponse);
    }
    let err = |position: usize, reason: &str| CodecError::Grammar {
        position,
        reason: reason.to_string(),
    };
    let trimmed = text.trim();
    let Some(body) = trimmed.strip_suffix('.') else {
        return Err(err(trimmed.len(), "response must end with a period"));
    };
    let sentences: Vec<&str> = body.split('.').map(str::trim).collect();
    match sentences[0] {
        "Yes" if sentences.len() == 1 => return Ok(ParsedCorrection::approve(text)),
        "Yes" => return Err(err(1, "nothing may follow Yes")),
        "No" => {}
        _ => return Err(CodecError::Malformed(text.to_string())),
    }
    let rest = &sentences[1..];
    if rest.is_empty() {
        return Err(err(1, "No must be followed by at least one correction"));
    }
    if !rest.len().is_multiple_of(2) {
        return Err(err(rest.len(), "each direction needs a magnitude sentence"));
    }
    let mut delta = CorrectionDelta::ZERO;
    let mut last_axis: Option<Axis> = None;
    for (i, pair) in rest.chunks(2).enumerate() {
        let position = 1 + 2 * i;
        let (verb, word) = pair[0]
            .split_once(' ')
            .ok_or_else(|| err(position, "expected '<Move|Rotate> <direction>'"))?;
        let direction = Direction::from_word(word).ok_or_else(|| err(position, "unknown direction"))?;
        let expected_verb = if direction.axis() == Axis::Rz { "Rotate" } else { "Move" };
        if verb != expected_verb {
            return Err(err(position, "verb does not match direction"));
        }
        let magnitude = match pair[1] {
            "Small" => Magnitude::Small,
            "Large" => Magnitude::Large,
            _ => return Err(err(position + 1, "magnitude must be Small or Large")),
        };
        let axis = direction.axis();
        if last_axis.is_some_and(|prev| prev >= axis) {
            return Err(err(position, "axes must appear once each, in x, y, z, rz order"));
        }
        last_axis = Some(axis);
        delta.set(axis, direction.sign() * th.step(magnitude));
    }
    Ok(ParsedCorrection {
        verdict: Verdict::Correct,
        delta,
        raw_text: text.to_string(),
    })
}
