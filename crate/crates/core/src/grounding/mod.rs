//! Node labeling and action grounding.
//!
//! Room nodes get a [`RoomLabel`] from a [`LabelClient`] and an action from an
//! [`ActionClient`] that compares consecutive room-node frames. Transition
//! nodes are never annotated. The final room node's action is always `Stop`
//! and is set locally.

mod http;
mod stub;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{ActionRequest, ActionResponse, HealthResponse, HttpActionClient, HttpLabelClient, LabelRequest, LabelResponse};
pub use stub::{ScriptedActionClient, StubActionClient, StubLabelClient, TableError};

use crate::frames::{FrameError, ImageStore};
use crate::model::{Action, FrameRef, ModelError, NodeKind, RoomLabel, Trajectory, TrajectoryNode};

/// Image handed to a client: the frame key plus raw bytes (possibly empty
/// when the backend keys on frame ids alone).
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub key: &'a str,
    pub bytes: &'a [u8],
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ClientError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
}

pub trait LabelClient: Send + Sync {
    fn label(&self, image: ImageInput<'_>) -> Result<RoomLabel, ClientError>;
}

/// Infers the move between two frames. Implementations never return `Stop`.
pub trait ActionClient: Send + Sync {
    fn infer(&self, a: ImageInput<'_>, b: ImageInput<'_>) -> Result<Action, ClientError>;
}

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    #[error("labeler unavailable after {attempts} attempts: {last}")]
    LabelerUnavailable { attempts: u32, last: ClientError },
    #[error("action client unavailable after {attempts} attempts: {last}")]
    ActionClientUnavailable { attempts: u32, last: ClientError },
    #[error("action client returned Stop for an intermediate node")]
    StopFromClient,
    #[error("precondition violated: {0}")]
    PreconditionViolated(&'static str),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Client retry schedule: `retries` extra attempts with exponential backoff
/// starting at `base_delay_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay_ms: 100,
        }
    }
}

impl RetryPolicy {
    pub const NO_DELAY: RetryPolicy = RetryPolicy {
        retries: 3,
        base_delay_ms: 0,
    };

    /// Runs `op` until it succeeds or the attempts run out. Returns the
    /// number of attempts made with the final error.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ClientError>) -> Result<T, (u32, ClientError)> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if attempt > self.retries => return Err((attempt, e)),
                Err(_) => {
                    if self.base_delay_ms > 0 {
                        let factor = 1u64 << (attempt - 1).min(16);
                        std::thread::sleep(Duration::from_millis(self.base_delay_ms.saturating_mul(factor)));
                    }
                }
            }
        }
    }
}

/// Memoizes labels by frame key so every frame is sent to the backend at
/// most once per pipeline run.
pub struct CachedLabeler {
    inner: Arc<dyn LabelClient>,
    cache: Mutex<HashMap<String, RoomLabel>>,
    calls: AtomicUsize,
}

impl CachedLabeler {
    pub fn new(inner: Arc<dyn LabelClient>) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of calls forwarded to the wrapped client.
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LabelClient for CachedLabeler {
    fn label(&self, image: ImageInput<'_>) -> Result<RoomLabel, ClientError> {
        if let Some(hit) = self.cache.lock().expect("label cache poisoned").get(image.key) {
            return Ok(hit.clone());
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let label = self.inner.label(image)?;
        self.cache
            .lock()
            .expect("label cache poisoned")
            .insert(image.key.to_string(), label.clone());
        Ok(label)
    }
}

/// Labels one frame with retries.
pub fn label_frame(
    frame: &FrameRef,
    client: &dyn LabelClient,
    images: &dyn ImageStore,
    retry: RetryPolicy,
) -> Result<RoomLabel, GroundingError> {
    let bytes = images.image_bytes(frame)?;
    let key = frame.key();
    retry
        .run(|| client.label(ImageInput { key: &key, bytes: &bytes }))
        .map_err(|(attempts, last)| GroundingError::LabelerUnavailable { attempts, last })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingOptions {
    pub retry: RetryPolicy,
    /// Upper bound on concurrent label requests.
    pub max_inflight: usize,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            max_inflight: 4,
        }
    }
}

/// Attaches a label to every room node.
pub fn label_nodes(
    traj: &Trajectory,
    client: &dyn LabelClient,
    images: &dyn ImageStore,
    opts: &GroundingOptions,
) -> Result<Trajectory, GroundingError> {
    if traj.room_nodes().any(|n| n.label.is_some() || n.action.is_some()) {
        return Err(GroundingError::PreconditionViolated("trajectory is already labeled"));
    }
    let room_positions: Vec<usize> = traj
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.is_room())
        .map(|(i, _)| i)
        .collect();
    let workers = opts.max_inflight.clamp(1, room_positions.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RoomLabel, GroundingError>>>> =
        Mutex::new((0..room_positions.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some(&pos) = room_positions.get(slot) else { break };
                let res = label_frame(&traj.nodes()[pos].frame, client, images, opts.retry);
                results.lock().expect("label results poisoned")[slot] = Some(res);
            });
        }
    });
    let mut nodes = traj.nodes().to_vec();
    for (slot, res) in results.into_inner().expect("label results poisoned").into_iter().enumerate() {
        nodes[room_positions[slot]].label = Some(res.expect("every slot is filled")?);
    }
    Ok(traj.with_nodes(nodes)?)
}

/// Sets each room node's action from the client, comparing it with the next
/// room node's frame; the final room node gets `Stop`. Calls run sequentially
/// in node order, so a trajectory with K rooms makes exactly K-1 calls.
pub fn ground_actions(
    traj: &Trajectory,
    client: &dyn ActionClient,
    images: &dyn ImageStore,
    retry: RetryPolicy,
) -> Result<Trajectory, GroundingError> {
    if !traj.is_labeled() {
        return Err(GroundingError::PreconditionViolated("trajectory is not labeled"));
    }
    if traj.room_nodes().any(|n| n.action.is_some()) {
        return Err(GroundingError::PreconditionViolated("actions already set"));
    }
    let mut nodes = traj.nodes().to_vec();
    let rooms: Vec<usize> = nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.is_room())
        .map(|(i, _)| i)
        .collect();
    for w in rooms.windows(2) {
        let (fa, fb) = (&nodes[w[0]].frame, &nodes[w[1]].frame);
        let (ka, kb) = (fa.key(), fb.key());
        let (ba, bb) = (images.image_bytes(fa)?, images.image_bytes(fb)?);
        let action = retry
            .run(|| {
                client.infer(
                    ImageInput { key: &ka, bytes: &ba },
                    ImageInput { key: &kb, bytes: &bb },
                )
            })
            .map_err(|(attempts, last)| GroundingError::ActionClientUnavailable { attempts, last })?;
        if action == Action::Stop {
            return Err(GroundingError::StopFromClient);
        }
        nodes[w[0]].action = Some(action);
    }
    let last = *rooms.last().expect("trajectory has rooms");
    nodes[last].action = Some(Action::Stop);
    Ok(traj.with_nodes(nodes)?)
}

/// One `(image, label, action)` unit of the generation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub frame: FrameRef,
    pub label: Option<RoomLabel>,
    pub action: Option<Action>,
}

pub fn triplet_view(traj: &Trajectory) -> Result<Vec<Triplet>, GroundingError> {
    if !traj.is_grounded() {
        return Err(GroundingError::PreconditionViolated("trajectory is not grounded"));
    }
    Ok(traj
        .nodes()
        .iter()
        .map(|n| Triplet {
            frame: n.frame.clone(),
            label: n.label.clone(),
            action: n.action,
        })
        .collect())
}

/// Inverse of [`triplet_view`]: annotated triplets are room nodes, bare ones
/// are transitions.
pub fn nodes_from_triplets(triplets: &[Triplet]) -> Vec<TrajectoryNode> {
    triplets
        .iter()
        .map(|t| TrajectoryNode {
            kind: if t.label.is_some() {
                NodeKind::Room
            } else {
                NodeKind::Transition
            },
            frame: t.frame.clone(),
            label: t.label.clone(),
            action: t.action,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::NoImages;
    use crate::lexicon::RoomType;
    use crate::model::RoomBounds;
    use std::sync::atomic::AtomicU32;

    fn frame(i: u32) -> FrameRef {
        FrameRef::new("v", i, i as f64)
    }

    fn traj(rooms: &[u32], transitions: &[u32]) -> Trajectory {
        let mut idx: Vec<(u32, bool)> = rooms.iter().map(|&i| (i, true)).chain(transitions.iter().map(|&i| (i, false))).collect();
        idx.sort();
        let nodes = idx
            .into_iter()
            .map(|(i, room)| if room { TrajectoryNode::room(frame(i)) } else { TrajectoryNode::transition(frame(i)) })
            .collect();
        Trajectory::new("t", "v", nodes, 0, RoomBounds::default()).unwrap()
    }

    fn table(entries: &[(u32, &str)]) -> StubLabelClient {
        StubLabelClient::from_entries(entries.iter().map(|&(i, room)| {
            (frame(i).key(), RoomLabel::new(RoomType::new_unchecked(room), Vec::new(), 0.9).unwrap())
        }))
    }

    struct Flaky {
        fails: AtomicU32,
    }

    impl LabelClient for Flaky {
        fn label(&self, _: ImageInput<'_>) -> Result<RoomLabel, ClientError> {
            if self.fails.fetch_sub(1, Ordering::SeqCst) > 0 {
                Err(ClientError::Unavailable("boom".into()))
            } else {
                Ok(RoomLabel::new(RoomType::new_unchecked("kitchen"), Vec::new(), 1.0).unwrap())
            }
        }
    }

    #[test]
    fn labels_room_nodes_only() {
        let t = traj(&[1, 3], &[2]);
        let client = table(&[(1, "kitchen"), (3, "bedroom")]);
        let labeled = label_nodes(&t, &client, &NoImages, &GroundingOptions::default()).unwrap();
        let labels: Vec<_> = labeled.nodes().iter().map(|n| n.label.as_ref().map(|l| l.room_type.as_str())).collect();
        assert_eq!(labels, vec![Some("kitchen"), None, Some("bedroom")]);
        assert_eq!(labeled.nodes()[1], t.nodes()[1]);
    }

    #[test]
    fn relabeling_is_rejected() {
        let t = traj(&[1, 3], &[]);
        let client = table(&[(1, "kitchen"), (3, "bedroom")]);
        let labeled = label_nodes(&t, &client, &NoImages, &GroundingOptions::default()).unwrap();
        assert!(matches!(
            label_nodes(&labeled, &client, &NoImages, &GroundingOptions::default()),
            Err(GroundingError::PreconditionViolated(_))
        ));
    }

    #[test]
    fn labels_match_synthetic_map_under_concurrency() {
        let rooms: Vec<u32> = (0..7).map(|i| i * 2).collect();
        let names = ["kitchen", "hallway", "bedroom", "bathroom", "office", "garage", "attic"];
        let map: Vec<(u32, &str)> = rooms.iter().copied().zip(names).collect();
        let t = traj(&rooms, &[1, 3, 5]);
        let opts = GroundingOptions { max_inflight: 3, ..Default::default() };
        let labeled = label_nodes(&t, &table(&map), &NoImages, &opts).unwrap();
        let got: Vec<_> = labeled.room_nodes().map(|n| n.label.as_ref().unwrap().room_type.to_string()).collect();
        assert_eq!(got, names);
    }

    #[test]
    fn retries_then_succeeds_or_surfaces() {
        let ok = Flaky { fails: AtomicU32::new(3) };
        assert!(label_frame(&frame(1), &ok, &NoImages, RetryPolicy::NO_DELAY).is_ok());
        let bad = Flaky { fails: AtomicU32::new(4) };
        match label_frame(&frame(1), &bad, &NoImages, RetryPolicy::NO_DELAY) {
            Err(GroundingError::LabelerUnavailable { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn actions_forward_then_stop() {
        let t = traj(&[1, 4, 8], &[2]);
        let labeled = label_nodes(&t, &table(&[(1, "kitchen"), (4, "hallway"), (8, "bedroom")]), &NoImages, &GroundingOptions::default()).unwrap();
        let client = ScriptedActionClient::constant(Action::Forward);
        let grounded = ground_actions(&labeled, &client, &NoImages, RetryPolicy::NO_DELAY).unwrap();
        let actions: Vec<_> = grounded.room_nodes().map(|n| n.action.unwrap()).collect();
        assert_eq!(actions, vec![Action::Forward, Action::Forward, Action::Stop]);
        assert_eq!(client.calls(), 2);
    }

    #[test]
    fn two_rooms_one_call_and_script_followed() {
        let t = traj(&[1, 3], &[2]);
        let labeled = label_nodes(&t, &table(&[(1, "kitchen"), (3, "bedroom")]), &NoImages, &GroundingOptions::default()).unwrap();
        let client = ScriptedActionClient::from_pairs([((frame(1).key(), frame(3).key()), Action::TurnRight)]);
        let grounded = ground_actions(&labeled, &client, &NoImages, RetryPolicy::NO_DELAY).unwrap();
        assert_eq!(client.calls(), 1);
        let actions: Vec<_> = grounded.room_nodes().map(|n| n.action.unwrap()).collect();
        assert_eq!(actions, vec![Action::TurnRight, Action::Stop]);
    }

    #[test]
    fn ground_requires_labels() {
        let t = traj(&[1, 3], &[]);
        assert!(matches!(
            ground_actions(&t, &ScriptedActionClient::constant(Action::Forward), &NoImages, RetryPolicy::NO_DELAY),
            Err(GroundingError::PreconditionViolated(_))
        ));
    }

    #[test]
    fn triplets_follow_node_order() {
        let t = traj(&[1, 3], &[2]);
        let labeled = label_nodes(&t, &table(&[(1, "kitchen"), (3, "bedroom")]), &NoImages, &GroundingOptions::default()).unwrap();
        assert!(matches!(triplet_view(&labeled), Err(GroundingError::PreconditionViolated(_))));
        let grounded = ground_actions(&labeled, &ScriptedActionClient::constant(Action::Forward), &NoImages, RetryPolicy::NO_DELAY).unwrap();
        let triplets = triplet_view(&grounded).unwrap();
        assert_eq!(triplets.len(), grounded.nodes().len());
        let shape: Vec<_> = triplets
            .iter()
            .map(|t| (t.frame.frame_index, t.label.as_ref().map(|l| l.room_type.to_string()), t.action))
            .collect();
        assert_eq!(
            shape,
            vec![
                (1, Some("kitchen".to_string()), Some(Action::Forward)),
                (2, None, None),
                (3, Some("bedroom".to_string()), Some(Action::Stop)),
            ]
        );
        let rebuilt = grounded.with_nodes(nodes_from_triplets(&triplets)).unwrap();
        assert_eq!(rebuilt, grounded);
    }
}
