//! Shared domain types: frames, trajectories, instructions and verification
//! records. Everything here is an immutable value once constructed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::lexicon::RoomType;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("trajectory has {found} room nodes, expected {min}..={max}")]
    RoomCount { found: usize, min: usize, max: usize },
    #[error("trajectory must start and end with a room node")]
    EndpointNotRoom,
    #[error("node {position}: frame_index must strictly increase")]
    FrameOrder { position: usize },
    #[error("node {position}: frame belongs to video {found:?}, trajectory is {expected:?}")]
    VideoMismatch {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("node {position}: transition nodes carry no label or action")]
    TransitionAnnotated { position: usize },
    #[error("node {position}: Stop is only allowed on the final room node")]
    StopNotTerminal { position: usize },
    #[error("final room node must have action Stop once grounded")]
    TerminalNotStop,
    #[error("room nodes are partially {what}")]
    PartialAnnotation { what: &'static str },
    #[error("room nodes carry actions but no labels")]
    ActionsWithoutLabels,
    #[error("node {position}: invalid timestamp")]
    Timestamp { position: usize },
    #[error("room confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("instruction text invalid: {0}")]
    Instruction(&'static str),
    #[error("status Verified requires a Pass verdict")]
    VerifiedWithoutPass,
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("unknown granularity {0:?}")]
    UnknownGranularity(String),
}

/// Reference to one extracted video frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub frame_index: u32,
    pub timestamp_s: f64,
}

impl FrameRef {
    pub fn new(video_id: impl Into<String>, frame_index: u32, timestamp_s: f64) -> Self {
        Self {
            video_id: video_id.into(),
            frame_index,
            timestamp_s,
        }
    }

    /// Stable key used by label tables, caches and the adapter service,
    /// e.g. `video1/f004`.
    pub fn key(&self) -> String {
        format!("{}/f{:03}", self.video_id, self.frame_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Stop];
    pub const MOVES: [Action; 3] = [Action::Forward, Action::TurnLeft, Action::TurnRight];

    /// Imperative phrase used in rendered instructions.
    pub fn phrase(self) -> &'static str {
        match self {
            Action::Forward => "go straight",
            Action::TurnLeft => "turn left",
            Action::TurnRight => "turn right",
            Action::Stop => "stop",
        }
    }

    /// Name used by the adapter service wire format.
    pub fn wire_name(self) -> &'static str {
        match self {
            Action::Forward => "forward",
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::Stop => "stop",
        }
    }

    pub fn is_move(self) -> bool {
        self != Action::Stop
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Action::Forward => "Forward",
            Action::TurnLeft => "TurnLeft",
            Action::TurnRight => "TurnRight",
            Action::Stop => "Stop",
        };
        f.write_str(s)
    }
}

impl FromStr for Action {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "forward" => Ok(Action::Forward),
            "turnleft" => Ok(Action::TurnLeft),
            "turnright" => Ok(Action::TurnRight),
            "stop" => Ok(Action::Stop),
            _ => Err(ModelError::UnknownAction(s.to_string())),
        }
    }
}

/// Node label: room type plus salient objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomLabel {
    pub room_type: RoomType,
    pub objects: Vec<String>,
    pub room_confidence: f64,
}

impl RoomLabel {
    /// Drops duplicate objects (first occurrence wins) and rejects
    /// confidences outside [0, 1].
    pub fn new(
        room_type: RoomType,
        objects: impl IntoIterator<Item = String>,
        room_confidence: f64,
    ) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&room_confidence) {
            return Err(ModelError::Confidence(room_confidence));
        }
        let mut uniq: Vec<String> = Vec::new();
        for o in objects {
            let o = o.trim().to_lowercase();
            if !o.is_empty() && !uniq.contains(&o) {
                uniq.push(o);
            }
        }
        Ok(Self {
            room_type,
            objects: uniq,
            room_confidence,
        })
    }

    /// Prompt form: `"<object>, <object> with <room_type>"`, or just the room
    /// type when no objects are known.
    pub fn prompt_text(&self) -> String {
        if self.objects.is_empty() {
            self.room_type.to_string()
        } else {
            format!("{} with {}", self.objects.join(", "), self.room_type)
        }
    }

    /// Splits a prompt-form label back into `(objects, room_type_text)`.
    pub fn split_prompt_text(text: &str) -> (Vec<String>, &str) {
        match text.rfind(" with ") {
            Some(pos) => {
                let objects = text[..pos]
                    .split(',')
                    .map(|o| o.trim().to_string())
                    .filter(|o| !o.is_empty())
                    .collect();
                (objects, text[pos + 6..].trim())
            }
            None => (Vec::new(), text.trim()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Room,
    Transition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryNode {
    pub kind: NodeKind,
    pub frame: FrameRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<RoomLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
}

impl TrajectoryNode {
    pub fn room(frame: FrameRef) -> Self {
        Self {
            kind: NodeKind::Room,
            frame,
            label: None,
            action: None,
        }
    }

    pub fn transition(frame: FrameRef) -> Self {
        Self {
            kind: NodeKind::Transition,
            frame,
            label: None,
            action: None,
        }
    }

    pub fn is_room(&self) -> bool {
        self.kind == NodeKind::Room
    }
}

/// Inclusive bounds on the number of room nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for RoomBounds {
    fn default() -> Self {
        Self { min: 2, max: 7 }
    }
}

impl RoomBounds {
    /// Bounds used when reading stored trajectories, whose producer already
    /// enforced its configured maximum.
    pub const STORED: RoomBounds = RoomBounds {
        min: 2,
        max: usize::MAX,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryData", into = "TrajectoryData")]
pub struct Trajectory {
    trajectory_id: String,
    video_id: String,
    nodes: Vec<TrajectoryNode>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryData {
    trajectory_id: String,
    video_id: String,
    nodes: Vec<TrajectoryNode>,
    seed: u64,
}

impl TryFrom<TrajectoryData> for Trajectory {
    type Error = ModelError;

    fn try_from(d: TrajectoryData) -> Result<Self, Self::Error> {
        Trajectory::new(d.trajectory_id, d.video_id, d.nodes, d.seed, RoomBounds::STORED)
    }
}

impl From<Trajectory> for TrajectoryData {
    fn from(t: Trajectory) -> Self {
        TrajectoryData {
            trajectory_id: t.trajectory_id,
            video_id: t.video_id,
            nodes: t.nodes,
            seed: t.seed,
        }
    }
}

impl Trajectory {
    pub fn new(
        trajectory_id: impl Into<String>,
        video_id: impl Into<String>,
        nodes: Vec<TrajectoryNode>,
        seed: u64,
        bounds: RoomBounds,
    ) -> Result<Self, ModelError> {
        let video_id = video_id.into();
        validate_nodes(&video_id, &nodes, bounds)?;
        Ok(Self {
            trajectory_id: trajectory_id.into(),
            video_id,
            nodes,
            seed,
        })
    }

    pub fn id(&self) -> &str {
        &self.trajectory_id
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nodes(&self) -> &[TrajectoryNode] {
        &self.nodes
    }

    pub fn room_nodes(&self) -> impl Iterator<Item = &TrajectoryNode> {
        self.nodes.iter().filter(|n| n.is_room())
    }

    pub fn room_count(&self) -> usize {
        self.room_nodes().count()
    }

    pub fn is_labeled(&self) -> bool {
        self.room_nodes().all(|n| n.label.is_some())
    }

    pub fn is_grounded(&self) -> bool {
        self.room_nodes().all(|n| n.label.is_some() && n.action.is_some())
    }

    /// Returns a copy with replaced nodes, re-running every invariant check.
    pub fn with_nodes(&self, nodes: Vec<TrajectoryNode>) -> Result<Self, ModelError> {
        Trajectory::new(
            self.trajectory_id.clone(),
            self.video_id.clone(),
            nodes,
            self.seed,
            RoomBounds::STORED,
        )
    }

    /// Room types of the room nodes, in order. `None` until labeled.
    pub fn room_types(&self) -> Option<Vec<RoomType>> {
        self.room_nodes()
            .map(|n| n.label.as_ref().map(|l| l.room_type.clone()))
            .collect()
    }
}

fn validate_nodes(video_id: &str, nodes: &[TrajectoryNode], bounds: RoomBounds) -> Result<(), ModelError> {
    let rooms: Vec<usize> = nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.is_room())
        .map(|(i, _)| i)
        .collect();
    if rooms.len() < bounds.min || rooms.len() > bounds.max {
        return Err(ModelError::RoomCount {
            found: rooms.len(),
            min: bounds.min,
            max: bounds.max,
        });
    }
    if !nodes.first().is_some_and(|n| n.is_room()) || !nodes.last().is_some_and(|n| n.is_room()) {
        return Err(ModelError::EndpointNotRoom);
    }
    for (position, node) in nodes.iter().enumerate() {
        if node.frame.video_id != video_id {
            return Err(ModelError::VideoMismatch {
                position,
                expected: video_id.to_string(),
                found: node.frame.video_id.clone(),
            });
        }
        if !node.frame.timestamp_s.is_finite() || node.frame.timestamp_s < 0.0 {
            return Err(ModelError::Timestamp { position });
        }
        if position > 0 && node.frame.frame_index <= nodes[position - 1].frame.frame_index {
            return Err(ModelError::FrameOrder { position });
        }
        if node.kind == NodeKind::Transition && (node.label.is_some() || node.action.is_some()) {
            return Err(ModelError::TransitionAnnotated { position });
        }
    }
    let labeled = rooms.iter().filter(|&&i| nodes[i].label.is_some()).count();
    if labeled != 0 && labeled != rooms.len() {
        return Err(ModelError::PartialAnnotation { what: "labeled" });
    }
    let acted = rooms.iter().filter(|&&i| nodes[i].action.is_some()).count();
    if acted != 0 && acted != rooms.len() {
        return Err(ModelError::PartialAnnotation { what: "grounded" });
    }
    if acted > 0 {
        if labeled == 0 {
            return Err(ModelError::ActionsWithoutLabels);
        }
        let last = *rooms.last().expect("at least two rooms");
        for &i in &rooms {
            let action = nodes[i].action.expect("all room nodes have actions");
            if i == last && action != Action::Stop {
                return Err(ModelError::TerminalNotStop);
            }
            if i != last && action == Action::Stop {
                return Err(ModelError::StopNotTerminal { position: i });
            }
        }
    }
    Ok(())
}

/// One (room, action) unit of ground truth or extraction output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeActionPair {
    pub room_type: RoomType,
    pub action: Action,
}

impl NodeActionPair {
    pub fn new(room_type: RoomType, action: Action) -> Self {
        Self { room_type, action }
    }
}

impl fmt::Display for NodeActionPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.room_type, self.action.phrase())
    }
}

/// Requested level of detail. `Fine { environment: true }` also asks for
/// environment descriptions and key objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Granularity {
    Coarse,
    Fine { environment: bool },
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [
        Granularity::Coarse,
        Granularity::Fine { environment: false },
        Granularity::Fine { environment: true },
    ];

    pub fn is_fine(self) -> bool {
        matches!(self, Granularity::Fine { .. })
    }

    pub fn with_environment(self) -> bool {
        matches!(self, Granularity::Fine { environment: true })
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Coarse => "coarse",
            Granularity::Fine { environment: false } => "fine",
            Granularity::Fine { environment: true } => "fine+env",
        })
    }
}

impl FromStr for Granularity {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "coarse" | "concise" => Ok(Granularity::Coarse),
            "fine" | "detailed" => Ok(Granularity::Fine { environment: false }),
            "fine+env" | "fine-env" | "detailed+env" => Ok(Granularity::Fine { environment: true }),
            _ => Err(ModelError::UnknownGranularity(s.to_string())),
        }
    }
}

impl From<Granularity> for String {
    fn from(g: Granularity) -> Self {
        g.to_string()
    }
}

impl TryFrom<String> for Granularity {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanupEdit {
    pub rule_id: String,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstructionData", into = "InstructionData")]
pub struct Instruction {
    text: String,
    granularity: Granularity,
    model_id: String,
    attempt: u32,
    cleanup_edits: Vec<CleanupEdit>,
}

#[derive(Serialize, Deserialize)]
struct InstructionData {
    text: String,
    granularity: Granularity,
    model_id: String,
    attempt: u32,
    #[serde(default)]
    cleanup_edits: Vec<CleanupEdit>,
}

impl TryFrom<InstructionData> for Instruction {
    type Error = ModelError;

    fn try_from(d: InstructionData) -> Result<Self, Self::Error> {
        Instruction::new(d.text, d.granularity, d.model_id, d.attempt, d.cleanup_edits)
    }
}

impl From<Instruction> for InstructionData {
    fn from(i: Instruction) -> Self {
        InstructionData {
            text: i.text,
            granularity: i.granularity,
            model_id: i.model_id,
            attempt: i.attempt,
            cleanup_edits: i.cleanup_edits,
        }
    }
}

pub const TERMINAL_PUNCTUATION: [char; 3] = ['.', '!', '?'];

impl Instruction {
    pub fn new(
        text: impl Into<String>,
        granularity: Granularity,
        model_id: impl Into<String>,
        attempt: u32,
        cleanup_edits: Vec<CleanupEdit>,
    ) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::Instruction("empty"));
        }
        if text.chars().any(char::is_control) {
            return Err(ModelError::Instruction("contains control characters"));
        }
        if !text.ends_with(TERMINAL_PUNCTUATION) {
            return Err(ModelError::Instruction("missing terminal punctuation"));
        }
        if attempt == 0 {
            return Err(ModelError::Instruction("attempt numbers start at 1"));
        }
        Ok(Self {
            text,
            granularity,
            model_id: model_id.into(),
            attempt,
            cleanup_edits,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    pub fn cleanup_edits(&self) -> &[CleanupEdit] {
        &self.cleanup_edits
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMismatch {
    pub index: usize,
    pub expected: Option<NodeActionPair>,
    pub got: Option<NodeActionPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Mismatch(Vec<PairMismatch>),
    ExtractionFailure,
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExtractorKind {
    #[serde(rename = "lmm")]
    Lmm,
    #[serde(rename = "rule")]
    RuleBased,
}

impl FromStr for ExtractorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lmm" => Ok(ExtractorKind::Lmm),
            "rule" | "rule-based" | "rulebased" => Ok(ExtractorKind::RuleBased),
            other => Err(format!("unknown extractor {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub extracted: Vec<NodeActionPair>,
    pub verdict: Verdict,
    pub attempts_used: u32,
    pub extractor: ExtractorKind,
    /// Content hash of the generation templates used for the final attempt.
    pub template_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairStatus {
    Verified,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PairData", into = "PairData")]
pub struct PathInstructionPair {
    trajectory: Trajectory,
    instruction: Instruction,
    verification: VerificationRecord,
    status: PairStatus,
}

#[derive(Serialize, Deserialize)]
struct PairData {
    trajectory: Trajectory,
    instruction: Instruction,
    verification: VerificationRecord,
    status: PairStatus,
}

impl TryFrom<PairData> for PathInstructionPair {
    type Error = ModelError;

    fn try_from(d: PairData) -> Result<Self, Self::Error> {
        PathInstructionPair::new(d.trajectory, d.instruction, d.verification, d.status)
    }
}

impl From<PathInstructionPair> for PairData {
    fn from(p: PathInstructionPair) -> Self {
        PairData {
            trajectory: p.trajectory,
            instruction: p.instruction,
            verification: p.verification,
            status: p.status,
        }
    }
}

impl PathInstructionPair {
    pub fn new(
        trajectory: Trajectory,
        instruction: Instruction,
        verification: VerificationRecord,
        status: PairStatus,
    ) -> Result<Self, ModelError> {
        if status == PairStatus::Verified && !verification.verdict.is_pass() {
            return Err(ModelError::VerifiedWithoutPass);
        }
        Ok(Self {
            trajectory,
            instruction,
            verification,
            status,
        })
    }

    /// `<trajectory_id>:<granularity>`; unique within a dataset.
    pub fn pair_id(&self) -> String {
        format!("{}:{}", self.trajectory.id(), self.instruction.granularity())
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn instruction(&self) -> &Instruction {
        &self.instruction
    }

    pub fn verification(&self) -> &VerificationRecord {
        &self.verification
    }

    pub fn status(&self) -> PairStatus {
        self.status
    }

    pub fn is_verified(&self) -> bool {
        self.status == PairStatus::Verified
    }
}
