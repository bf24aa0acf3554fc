//! Offline completion backends.
//!
//! Generation prompts are answered by rendering the prompt's own triplet
//! block with the reference renderer. The lossy variant then corrupts that
//! rendering: with probability `swap_prob` one room or action slot is swapped
//! for another vocabulary member, and with probability `noise_prob` a run of
//! special characters or a prompt-template fragment is spliced in at a word
//! boundary. Every corruption is reported with the completion.
//!
//! Extraction prompts are always answered faithfully, using a small grammar
//! of the rendered phrasings that does not consult the room lexicon.

use std::sync::LazyLock;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Completion, CompletionBackend, SendError, Usage};
use crate::lexicon::Vocabulary;
use crate::model::Action;
use crate::prompt::{embedded_instruction, parse_triplet_block, steps_from_lines, Prompt};
use crate::render::render_instruction;

/// Characters that noise runs are drawn from.
pub const NOISE_CHARS: &[char] = &['@', '#', '$', '%', '^', '*', '~', '|', '\u{FFFD}', '\u{0000}', '\u{0007}', '\u{200B}'];

/// Prompt-template debris a chat model sometimes echoes.
pub const TEMPLATE_FRAGMENTS: &[&str] = &[
    "{{triplets}}",
    "{{granularity_directive}}",
    "<|im_end|>",
    "[/INST]",
    "### Response:",
    "(image#2, None, None)",
    "Output format:",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    SpecialRun,
    TemplateFragment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Corruption {
    /// Room slot `slot` (0-based over room nodes) renamed. `compared` is false
    /// only for the final room, which is outside the compared pair sequence.
    RoomSwap {
        slot: usize,
        from: String,
        to: String,
        compared: bool,
    },
    ActionSwap { slot: usize, from: Action, to: Action },
    Noise {
        kind: NoiseKind,
        inserted: String,
        byte_offset: usize,
    },
}

impl Corruption {
    pub fn alters_compared_pair(&self) -> bool {
        match self {
            Corruption::RoomSwap { compared, .. } => *compared,
            Corruption::ActionSwap { .. } => true,
            Corruption::Noise { .. } => false,
        }
    }

    pub fn alters_destination(&self) -> bool {
        matches!(self, Corruption::RoomSwap { compared: false, .. })
    }

    pub fn is_noise(&self) -> bool {
        matches!(self, Corruption::Noise { .. })
    }
}

pub struct MockBackend {
    seed: u64,
    swap_prob: f64,
    noise_prob: f64,
    vocab: Vocabulary,
    model_id: &'static str,
}

impl MockBackend {
    pub fn faithful(seed: u64, vocab: Vocabulary) -> Self {
        Self {
            seed,
            swap_prob: 0.0,
            noise_prob: 0.0,
            vocab,
            model_id: "mock-faithful",
        }
    }

    pub fn lossy(seed: u64, swap_prob: f64, noise_prob: f64, vocab: Vocabulary) -> Self {
        Self {
            seed,
            swap_prob,
            noise_prob,
            vocab,
            model_id: "mock-lossy",
        }
    }

    fn rng(&self, prompt: &Prompt, attempt: u32) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(prompt.request_hash().as_bytes());
        h.update(attempt.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    /// Faithful rendering plus the corruptions drawn for this request.
    pub fn generate(&self, prompt: &Prompt, attempt: u32) -> Option<(String, Vec<Corruption>)> {
        let g = prompt.granularity()?;
        let mut steps = steps_from_lines(&parse_triplet_block(&prompt.user_text))?;
        let mut rng = self.rng(prompt, attempt);
        let mut log = Vec::new();

        if self.swap_prob > 0.0 && rng.random_bool(self.swap_prob) {
            let k = steps.len();
            let slot = rng.random_range(0..(2 * k - 1));
            if slot < k {
                let from = steps[slot].room.clone();
                let others: Vec<&str> = self
                    .vocab
                    .rooms
                    .rooms()
                    .iter()
                    .map(|r| r.as_str())
                    .filter(|r| *r != from)
                    .collect();
                let to = others.choose(&mut rng).expect("lexicon has several rooms").to_string();
                steps[slot].room = to.clone();
                log.push(Corruption::RoomSwap {
                    slot,
                    from,
                    to,
                    compared: slot + 1 < k,
                });
            } else {
                let slot = slot - k;
                let from = steps[slot].action;
                let others: Vec<Action> = Action::MOVES.into_iter().filter(|a| *a != from).collect();
                let to = *others.choose(&mut rng).expect("two other moves");
                steps[slot].action = to;
                log.push(Corruption::ActionSwap { slot, from, to });
            }
        }

        let mut text = render_instruction(&steps, g);

        if self.noise_prob > 0.0 && rng.random_bool(self.noise_prob) {
            let (kind, inserted) = if rng.random_bool(0.5) {
                let len = rng.random_range(2..=5);
                let run: String = (0..len).map(|_| *NOISE_CHARS.choose(&mut rng).unwrap()).collect();
                (NoiseKind::SpecialRun, run)
            } else {
                let frag = TEMPLATE_FRAGMENTS.choose(&mut rng).unwrap().to_string();
                (NoiseKind::TemplateFragment, frag)
            };
            let mut boundaries = vec![0];
            boundaries.extend(text.match_indices(' ').map(|(i, _)| i));
            boundaries.push(text.len());
            let at = *boundaries.choose(&mut rng).unwrap();
            text = if at == 0 {
                format!("{inserted} {text}")
            } else {
                format!("{} {inserted}{}", &text[..at], &text[at..])
            };
            log.push(Corruption::Noise {
                kind,
                inserted,
                byte_offset: at,
            });
        }
        Some((text, log))
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl CompletionBackend for MockBackend {
    fn model_id(&self) -> &str {
        self.model_id
    }

    fn send(&self, prompt: &Prompt, attempt: u32) -> Result<Completion, SendError> {
        let (text, corruptions) = if prompt.is_extraction() {
            let instruction = embedded_instruction(prompt).ok_or_else(|| SendError::Rejected {
                status: 400,
                detail: "extraction prompt carries no instruction".into(),
            })?;
            (mock_extraction_answer(instruction), Vec::new())
        } else {
            self.generate(prompt, attempt).ok_or_else(|| SendError::Rejected {
                status: 400,
                detail: "prompt carries no usable triplet block".into(),
            })?
        };
        Ok(Completion {
            usage: Usage {
                prompt_tokens: word_count(&prompt.system_text) + word_count(&prompt.user_text),
                completion_tokens: word_count(&text),
            },
            text,
            model_id: self.model_id.to_string(),
            sends: 0,
            corruptions,
        })
    }
}

const MOVE: &str = "(go straight|turn left|turn right)";

static FINE_START: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^begin in the ([a-z][a-z ]*?)[,.]").unwrap());
static FINE_STEP: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"(?i)\b{MOVE} and continue until you reach the ([a-z][a-z ]*?)[,.]")).unwrap()
});
static CHAIN_STEP: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"(?i)\b(?:in|from|into|enter) the ([a-z][a-z ]*?),? (?:and |then )?{MOVE}\b")).unwrap()
});

/// Answer to an extraction request in the `(<room>, <action>)` line format,
/// or `NONE` when the text follows neither known phrasing.
pub fn mock_extraction_answer(instruction: &str) -> String {
    let text = instruction.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(start) = FINE_START.captures(&text) {
        let mut room = start[1].to_lowercase();
        for c in FINE_STEP.captures_iter(&text) {
            pairs.push((room, c[1].to_lowercase()));
            room = c[2].to_lowercase();
        }
    } else {
        for c in CHAIN_STEP.captures_iter(&text) {
            pairs.push((c[1].to_lowercase(), c[2].to_lowercase()));
        }
    }
    if pairs.is_empty() {
        return "NONE".to_string();
    }
    pairs
        .iter()
        .map(|(r, a)| format!("({r}, {a})"))
        .collect::<Vec<_>>()
        .join("\n")
}
