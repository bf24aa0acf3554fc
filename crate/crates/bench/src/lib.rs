//! Deterministic inputs shared by the benchmarks.

use vlngen_core::sampler::AnnotatedFrame;
use vlngen_core::*;

const OBJECTS: &[&str] = &["sofa", "stove", "bed", "lamp", "desk", "mirror", "rug", "plant"];

/// Grounded trajectory with `k` rooms cycling through the lexicon and one
/// transition between each pair of rooms.
pub fn trajectory(id: &str, k: usize) -> Trajectory {
    let rooms = RoomLexicon::builtin().rooms().to_vec();
    let mut nodes = Vec::new();
    for i in 0..k {
        let frame = FrameRef::new("bench", 2 * i as u32, i as f64);
        let mut node = TrajectoryNode::room(frame);
        let objects = vec![OBJECTS[i % OBJECTS.len()].to_string()];
        node.label = Some(RoomLabel::new(rooms[i % rooms.len()].clone(), objects, 0.9).unwrap());
        node.action = Some(if i + 1 == k { Action::Stop } else { Action::MOVES[i % 3] });
        nodes.push(node);
        if i + 1 < k {
            nodes.push(TrajectoryNode::transition(FrameRef::new("bench", 2 * i as u32 + 1, i as f64 + 0.5)));
        }
    }
    Trajectory::new(id, "bench", nodes, 0, RoomBounds::default()).unwrap()
}

/// A labeled video of `rooms` dwell segments, each `dwell` frames long and
/// separated by two low-confidence frames.
pub fn annotated_video(rooms: usize, dwell: usize) -> Vec<AnnotatedFrame> {
    let lex = RoomLexicon::builtin();
    let types = lex.rooms();
    let mut out = Vec::new();
    for r in 0..rooms {
        let room = &types[r % types.len()];
        for d in 0..dwell + 2 {
            let idx = out.len() as u32;
            let transition = d >= dwell;
            let conf = if transition { 0.3 } else if d == dwell / 2 { 0.95 } else { 0.8 };
            let label = RoomLabel::new(room.clone(), vec![OBJECTS[r % OBJECTS.len()].to_string()], conf).unwrap();
            out.push(AnnotatedFrame {
                frame: FrameRef::new("bench", idx, idx as f64 * 0.5),
                label,
                is_room_candidate: !transition,
            });
        }
    }
    out
}
