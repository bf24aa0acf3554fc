//! Ground truth and the consistency verdict.

use crate::lexicon::{RoomLexicon, RoomType};
use crate::model::{Action, NodeActionPair, PairMismatch, Trajectory, Verdict};

use super::extract::sentence_spans;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("trajectory {0} is not grounded")]
pub struct NotGrounded(pub String);

/// All K `(room_type, action)` pairs of a grounded trajectory, the last one
/// carrying `Stop`.
pub fn all_pairs(traj: &Trajectory) -> Result<Vec<NodeActionPair>, NotGrounded> {
    traj.room_nodes()
        .map(|n| match (&n.label, n.action) {
            (Some(l), Some(a)) => Ok(NodeActionPair::new(l.room_type.clone(), a)),
            _ => Err(NotGrounded(traj.id().to_string())),
        })
        .collect()
}

/// The compared sequence: the first K−1 pairs. The terminal `Stop` pair is
/// checked separately by [`check_destination`].
pub fn ground_truth_pairs(traj: &Trajectory) -> Result<Vec<NodeActionPair>, NotGrounded> {
    let mut pairs = all_pairs(traj)?;
    pairs.pop();
    Ok(pairs)
}

/// Element-wise comparison on room type and action. Every differing index is
/// reported; `got` is `None` past the end of a short extraction and
/// `expected` is `None` past the end of the truth.
pub fn check_consistency(extracted: &[NodeActionPair], truth: &[NodeActionPair]) -> Verdict {
    let n = extracted.len().max(truth.len());
    let mismatches: Vec<PairMismatch> = (0..n)
        .filter(|&i| extracted.get(i) != truth.get(i))
        .map(|index| PairMismatch {
            index,
            expected: truth.get(index).cloned(),
            got: extracted.get(index).cloned(),
        })
        .collect();
    if mismatches.is_empty() {
        Verdict::Pass
    } else {
        Verdict::Mismatch(mismatches)
    }
}

/// Requires the last room mentioned in the last sentence to be `destination`.
/// On failure returns the mismatch entry for index K−1.
pub fn check_destination(text: &str, destination: &RoomType, k: usize, lexicon: &RoomLexicon) -> Option<PairMismatch> {
    let last_sentence = sentence_spans(text).last().map(|&(s, e)| &text[s..e]).unwrap_or("");
    let got = lexicon.find_mentions(last_sentence).pop().map(|m| m.2);
    if got.as_ref() == Some(destination) {
        return None;
    }
    Some(PairMismatch {
        index: k - 1,
        expected: Some(NodeActionPair::new(destination.clone(), Action::Stop)),
        got: got.map(|room| NodeActionPair::new(room, Action::Stop)),
    })
}
