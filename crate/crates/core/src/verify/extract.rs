//! (node, action) pair extraction from instruction text.

use std::sync::LazyLock;

use regex::Regex;

use crate::gateway::{Gateway, GatewayError};
use crate::lexicon::{Canonical, RoomType, Vocabulary};
use crate::model::NodeActionPair;
use crate::prompt::{build_extraction_prompt, PromptError, TemplateSet};

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("no (room, action) pair found")]
    NoPairs,
    #[error("unparseable extraction answer line {0:?}")]
    Unparseable(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Byte ranges of sentences: split after `.`, `!` or `?`.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if text[start..].trim().is_empty() {
        if let Some(last) = spans.last_mut() {
            last.1 = text.len();
        }
    } else {
        spans.push((start, text.len()));
    }
    spans.retain(|&(s, e)| !text[s..e].trim().is_empty());
    spans
}

fn sentence_of(spans: &[(usize, usize)], pos: usize) -> usize {
    spans.iter().position(|&(s, e)| pos >= s && pos < e).unwrap_or(spans.len())
}

/// Lexicon scan with proximity pairing. Each movement phrase is paired with
/// the closest room mentioned before it in the same sentence; failing that,
/// the closest room mentioned anywhere before it; failing that, the first
/// room after it in the same sentence. Stop phrases are not paired.
pub fn extract_rule_based(text: &str, vocab: &Vocabulary) -> Result<Vec<NodeActionPair>, ExtractError> {
    let spans = sentence_spans(text);
    let rooms = vocab.rooms.find_mentions(text);
    let mut pairs = Vec::new();
    for (start, end, action) in vocab.actions.find_mentions(text) {
        if !action.is_move() {
            continue;
        }
        let sentence = sentence_of(&spans, start);
        let before = rooms.iter().rev().find(|r| r.1 <= start);
        let same_before = before.filter(|r| sentence_of(&spans, r.0) == sentence);
        let same_after = || {
            rooms
                .iter()
                .find(|r| r.0 >= end && sentence_of(&spans, r.0) == sentence)
        };
        if let Some(room) = same_before.or(before).or_else(same_after) {
            pairs.push(NodeActionPair::new(room.2.clone(), action));
        }
    }
    if pairs.is_empty() {
        return Err(ExtractError::NoPairs);
    }
    Ok(pairs)
}

static ANSWER_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[-*\d.]*\s*\(\s*([^,()]+?)\s*,\s*([^()]+?)\s*\)\s*[.,;]?\s*$").unwrap());

/// Parses `(<room>, <action>)` lines. Rooms outside the lexicon become the
/// unknown room so they fail the comparison; stop lines are dropped.
pub fn parse_extraction_answer(answer: &str, vocab: &Vocabulary) -> Result<Vec<NodeActionPair>, ExtractError> {
    let mut pairs = Vec::new();
    for line in answer.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let Some(c) = ANSWER_LINE.captures(line) else {
            if line.eq_ignore_ascii_case("none") {
                continue;
            }
            return Err(ExtractError::Unparseable(line.to_string()));
        };
        let Canonical::Known(action) = vocab.actions.canonicalize(&c[2]) else {
            return Err(ExtractError::Unparseable(line.to_string()));
        };
        if !action.is_move() {
            continue;
        }
        let room = vocab.rooms.canonicalize(&c[1]).known().unwrap_or_else(RoomType::unknown);
        pairs.push(NodeActionPair::new(room, action));
    }
    if pairs.is_empty() {
        return Err(ExtractError::NoPairs);
    }
    Ok(pairs)
}

pub fn extract_lmm(
    text: &str,
    gateway: &Gateway,
    templates: &TemplateSet,
    vocab: &Vocabulary,
    attempt: u32,
) -> Result<Vec<NodeActionPair>, ExtractError> {
    let prompt = build_extraction_prompt(text, templates)?;
    let completion = gateway.complete(&prompt, attempt)?;
    parse_extraction_answer(&completion.text, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Action;

    fn pair(room: &str, action: Action) -> NodeActionPair {
        NodeActionPair::new(RoomType::new_unchecked(room), action)
    }

    #[test]
    fn worked_example() {
        let v = Vocabulary::builtin();
        let text = "Start from the dining room, turn left into the family room, then go straight into the living room";
        assert_eq!(
            extract_rule_based(text, &v).unwrap(),
            [pair("dining room", Action::TurnLeft), pair("family room", Action::Forward)]
        );
    }

    #[test]
    fn no_room_is_a_failure() {
        let v = Vocabulary::builtin();
        assert!(matches!(extract_rule_based("Stop here.", &v), Err(ExtractError::NoPairs)));
        assert!(matches!(extract_rule_based("Turn left.", &v), Err(ExtractError::NoPairs)));
    }

    #[test]
    fn action_before_room_in_sentence() {
        let v = Vocabulary::builtin();
        assert_eq!(
            extract_rule_based("Turn right into the kitchen.", &v).unwrap(),
            [pair("kitchen", Action::TurnRight)]
        );
    }

    #[test]
    fn pairing_crosses_sentences_backwards() {
        let v = Vocabulary::builtin();
        let text = "Begin in the lounge. Go straight and continue until you reach the hall. \
                    Turn left and continue until you reach the bedroom. Stop in the bedroom.";
        assert_eq!(
            extract_rule_based(text, &v).unwrap(),
            [pair("living room", Action::Forward), pair("hallway", Action::TurnLeft)]
        );
    }

    #[test]
    fn answer_lines() {
        let v = Vocabulary::builtin();
        let got = parse_extraction_answer("(Dining Room, turn left)\n1. (family room, Go Straight)\n(bedroom, stop)", &v).unwrap();
        assert_eq!(got, [pair("dining room", Action::TurnLeft), pair("family room", Action::Forward)]);
        let odd = parse_extraction_answer("(moon base, turn left)", &v).unwrap();
        assert!(odd[0].room_type.is_unknown());
        assert!(matches!(parse_extraction_answer("NONE", &v), Err(ExtractError::NoPairs)));
        assert!(matches!(
            parse_extraction_answer("I think the kitchen", &v),
            Err(ExtractError::Unparseable(_))
        ));
    }

    #[test]
    fn sentences() {
        assert_eq!(sentence_spans("A b. C d! "), [(0, 4), (4, 10)]);
        assert_eq!(sentence_spans("no end"), [(0, 6)]);
    }
}
