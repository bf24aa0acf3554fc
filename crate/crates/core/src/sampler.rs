//! Turns a labeled frame sequence into discrete room/transition trajectories.
//!
//! Frames whose room confidence clears the threshold are room candidates.
//! Consecutive candidates of one room type form a dwell run, represented by
//! its middle frame. A trajectory picks runs in temporal order such that
//! consecutive picks differ in room type; non-candidate frames between two
//! picked room frames become transition nodes, thinned evenly when there are
//! more than `max_transitions_between`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frames::ImageStore;
use crate::grounding::{label_frame, GroundingError, LabelClient, RetryPolicy};
use crate::lexicon::RoomType;
use crate::model::{FrameRef, ModelError, NodeKind, RoomBounds, RoomLabel, Trajectory, TrajectoryNode};

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedFrame {
    pub frame: FrameRef,
    pub label: RoomLabel,
    pub is_room_candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Minimum room confidence for a frame to be a room candidate.
    pub threshold: f64,
    pub min_rooms: usize,
    pub max_rooms: usize,
    pub max_transitions_between: usize,
    pub trajectories_per_video: usize,
    pub seed: u64,
    /// How many of the nearest eligible next rooms each step chooses among.
    pub branching: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            min_rooms: 2,
            max_rooms: 7,
            max_transitions_between: 3,
            trajectories_per_video: 8,
            seed: 0,
            branching: 2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("no valid trajectory: fewer than {min_rooms} distinct-room candidates in order")]
    NoValidTrajectory { min_rooms: usize },
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("invalid frame input: {0}")]
    Input(String),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(SamplerError::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.min_rooms < 2 {
            return Err(SamplerError::Config("min_rooms must be at least 2".into()));
        }
        if self.max_rooms < self.min_rooms {
            return Err(SamplerError::Config("max_rooms must be >= min_rooms".into()));
        }
        if self.branching == 0 {
            return Err(SamplerError::Config("branching must be at least 1".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> RoomBounds {
        RoomBounds {
            min: self.min_rooms,
            max: self.max_rooms,
        }
    }
}

/// Labels every frame once and marks room candidates.
pub fn annotate_frames(
    frames: &[FrameRef],
    labeler: &dyn LabelClient,
    images: &dyn ImageStore,
    threshold: f64,
    retry: RetryPolicy,
) -> Result<Vec<AnnotatedFrame>, SamplerError> {
    if frames.is_empty() {
        return Err(SamplerError::Input("no frames".into()));
    }
    if frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
        return Err(SamplerError::Input("frame_index must strictly increase".into()));
    }
    frames
        .iter()
        .map(|frame| {
            let label = label_frame(frame, labeler, images, retry)?;
            Ok(AnnotatedFrame {
                is_room_candidate: label.room_confidence >= threshold,
                frame: frame.clone(),
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Run {
    room: RoomType,
    /// Position in the annotated list of the representative frame.
    rep: usize,
}

fn dwell_runs(annotated: &[AnnotatedFrame]) -> Vec<Run> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < annotated.len() {
        if !annotated[i].is_room_candidate {
            i += 1;
            continue;
        }
        let room = &annotated[i].label.room_type;
        let mut j = i + 1;
        while j < annotated.len() && annotated[j].is_room_candidate && &annotated[j].label.room_type == room {
            j += 1;
        }
        runs.push(Run {
            room: room.clone(),
            rep: i + (j - i - 1) / 2,
        });
        i = j;
    }
    runs
}

/// Longest chain of consecutive-distinct runs starting at each run. Taking
/// the nearest run of a different type always achieves it.
fn chain_lengths(runs: &[Run]) -> Vec<usize> {
    let mut chain = vec![1; runs.len()];
    for i in (0..runs.len()).rev() {
        if let Some(j) = (i + 1..runs.len()).find(|&j| runs[j].room != runs[i].room) {
            chain[i] = 1 + chain[j];
        }
    }
    chain
}

/// Picks `limit` positions spread evenly over `0..n`.
fn evenly_spaced(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    (0..limit).map(|i| (2 * i + 1) * n / (2 * limit)).collect()
}

fn build_nodes(annotated: &[AnnotatedFrame], reps: &[usize], max_transitions: usize) -> Vec<TrajectoryNode> {
    let mut nodes = Vec::new();
    for (k, &rep) in reps.iter().enumerate() {
        nodes.push(TrajectoryNode::room(annotated[rep].frame.clone()));
        if let Some(&next) = reps.get(k + 1) {
            let gap: Vec<usize> = (rep + 1..next).filter(|&p| !annotated[p].is_room_candidate).collect();
            for pick in evenly_spaced(gap.len(), max_transitions) {
                nodes.push(TrajectoryNode::transition(annotated[gap[pick]].frame.clone()));
            }
        }
    }
    nodes
}

/// Draws one trajectory. The RNG stream is `draw_index` of a ChaCha8 seeded
/// with `config.seed`, so each draw is reproducible on its own.
pub fn sample_trajectory(
    annotated: &[AnnotatedFrame],
    config: &SamplerConfig,
    draw_index: u64,
) -> Result<Trajectory, SamplerError> {
    config.validate()?;
    let no_valid = || SamplerError::NoValidTrajectory {
        min_rooms: config.min_rooms,
    };
    let video_id = annotated.first().ok_or_else(no_valid)?.frame.video_id.clone();
    let runs = dwell_runs(annotated);
    let chain = chain_lengths(&runs);
    let starts: Vec<usize> = (0..runs.len()).filter(|&i| chain[i] >= config.min_rooms).collect();
    if starts.is_empty() {
        return Err(no_valid());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(draw_index);
    let start = starts[rng.random_range(0..starts.len())];
    let longest = chain[start].min(config.max_rooms);
    let target = rng.random_range(config.min_rooms..=longest);

    let mut picked = vec![start];
    while picked.len() < target {
        let cur = *picked.last().expect("non-empty");
        let still_needed = target - picked.len();
        let options: Vec<usize> = (cur + 1..runs.len())
            .filter(|&j| runs[j].room != runs[cur].room && chain[j] >= still_needed)
            .take(config.branching)
            .collect();
        // the nearest distinct run always qualifies, see chain_lengths
        picked.push(options[rng.random_range(0..options.len())]);
    }

    let reps: Vec<usize> = picked.iter().map(|&r| runs[r].rep).collect();
    let nodes = build_nodes(annotated, &reps, config.max_transitions_between);
    Ok(Trajectory::new(
        format!("{video_id}-{draw_index:03}"),
        video_id,
        nodes,
        config.seed,
        config.bounds(),
    )?)
}

fn node_signature(t: &Trajectory) -> Vec<(NodeKind, u32)> {
    t.nodes().iter().map(|n| (n.kind, n.frame.frame_index)).collect()
}

/// Draws `trajectories_per_video` times, skipping failed draws and repeats.
pub fn sample_many(annotated: &[AnnotatedFrame], config: &SamplerConfig) -> Vec<Trajectory> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for draw in 0..config.trajectories_per_video as u64 {
        if let Ok(t) = sample_trajectory(annotated, config, draw) {
            if seen.insert(node_signature(&t)) {
                out.push(t);
            }
        }
    }
    out
}
