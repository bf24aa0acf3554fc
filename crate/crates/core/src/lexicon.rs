//! Room and action vocabularies.
//!
//! Both vocabularies share one plain-text layout: an unindented canonical
//! term followed by indented surface forms. See `assets/rooms.lex` for the
//! shipped room lexicon.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::Action;

const BUILTIN_ROOMS: &str = include_str!("../assets/rooms.lex");
const BUILTIN_ACTIONS: &str = include_str!("../assets/actions.lex");

const ARTICLES: [&str; 3] = ["the ", "a ", "an "];

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("failed to read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: synonym before any canonical term")]
    OrphanSynonym { line: usize },
    #[error("line {line}: surface form {form:?} already maps to {existing:?}")]
    Conflict {
        line: usize,
        form: String,
        existing: String,
    },
    #[error("line {line}: unknown action {name:?}")]
    UnknownAction { line: usize, name: String },
    #[error("lexicon is empty")]
    Empty,
}

/// A canonical room type, always lowercase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoomType(String);

impl RoomType {
    const UNKNOWN: &'static str = "<unknown>";

    /// Placeholder for a room mention that no lexicon entry covers. It never
    /// equals a real room type, so it always produces a mismatch.
    pub fn unknown() -> Self {
        RoomType(Self::UNKNOWN.to_string())
    }

    pub fn is_unknown(&self) -> bool {
        self.0 == Self::UNKNOWN
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Builds a room type without consulting a lexicon. Intended for
    /// deserialization and tests; real input should go through
    /// [`RoomLexicon::canonicalize`].
    pub fn new_unchecked(s: impl Into<String>) -> Self {
        RoomType(s.into())
    }
}

impl fmt::Display for RoomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Outcome of canonicalization. `Unknown` is an ordinary value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Canonical<T> {
    Known(T),
    Unknown,
}

impl<T> Canonical<T> {
    pub fn known(self) -> Option<T> {
        match self {
            Canonical::Known(t) => Some(t),
            Canonical::Unknown => None,
        }
    }
}

struct Block {
    head: String,
    line: usize,
    forms: Vec<(usize, String)>,
}

fn parse_blocks(text: &str) -> Result<Vec<Block>, LexiconError> {
    let mut blocks: Vec<Block> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if raw.starts_with(char::is_whitespace) {
            let block = blocks
                .last_mut()
                .ok_or(LexiconError::OrphanSynonym { line })?;
            block.forms.push((line, trimmed.to_string()));
        } else {
            blocks.push(Block {
                head: trimmed.to_string(),
                line,
                forms: Vec::new(),
            });
        }
    }
    if blocks.is_empty() {
        return Err(LexiconError::Empty);
    }
    Ok(blocks)
}

/// Lowercases, trims, collapses whitespace, drops surrounding punctuation and
/// leading articles.
pub fn normalize_surface(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut s: String = lowered
        .trim_matches(|c: char| !c.is_alphanumeric())
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    while let Some(rest) = ARTICLES.iter().find_map(|a| s.strip_prefix(a)) {
        s = rest.to_string();
    }
    s
}

fn content_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

fn alternation<'a>(forms: impl Iterator<Item = &'a String>) -> Regex {
    let mut forms: Vec<&String> = forms.collect();
    // longest first so the regex engine prefers the longest surface form
    forms.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let body = forms
        .iter()
        .map(|f| {
            f.split(' ')
                .map(regex::escape)
                .collect::<Vec<_>>()
                .join(r"\s+")
        })
        .collect::<Vec<_>>()
        .join("|");
    Regex::new(&format!(r"(?i)\b(?:{body})\b")).expect("escaped alternation is a valid regex")
}

/// Room synonym table.
#[derive(Debug, Clone)]
pub struct RoomLexicon {
    forms: BTreeMap<String, RoomType>,
    canonical: Vec<RoomType>,
    version: String,
    scanner: Regex,
}

impl RoomLexicon {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_ROOMS).expect("bundled room lexicon parses")
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let blocks = parse_blocks(text)?;
        let mut forms = BTreeMap::<String, RoomType>::new();
        let mut canonical = Vec::new();
        for block in blocks {
            let room = RoomType(normalize_surface(&block.head));
            canonical.push(room.clone());
            let all = std::iter::once((block.line, block.head)).chain(block.forms);
            for (line, form) in all {
                let key = normalize_surface(&form);
                if let Some(existing) = forms.get(&key) {
                    if existing != &room {
                        return Err(LexiconError::Conflict {
                            line,
                            form: key,
                            existing: existing.to_string(),
                        });
                    }
                }
                forms.insert(key, room.clone());
            }
        }
        let scanner = alternation(forms.keys());
        Ok(Self {
            forms,
            canonical,
            version: content_hash(text),
            scanner,
        })
    }

    pub fn canonicalize(&self, raw: &str) -> Canonical<RoomType> {
        match self.forms.get(&normalize_surface(raw)) {
            Some(room) => Canonical::Known(room.clone()),
            None => Canonical::Unknown,
        }
    }

    pub fn contains(&self, room: &RoomType) -> bool {
        self.canonical.contains(room)
    }

    /// Canonical room types in file order.
    pub fn rooms(&self) -> &[RoomType] {
        &self.canonical
    }

    /// Content hash of the source file.
    pub fn version(&self) -> &str {
        &self.version
    }

    /// Finds every room mention in `text` as `(byte_start, byte_end, room)`,
    /// preferring the longest surface form at each position.
    pub fn find_mentions(&self, text: &str) -> Vec<(usize, usize, RoomType)> {
        self.scanner
            .find_iter(text)
            .filter_map(|m| {
                self.forms
                    .get(&normalize_surface(m.as_str()))
                    .map(|room| (m.start(), m.end(), room.clone()))
            })
            .collect()
    }
}

/// Action synonym table.
#[derive(Debug, Clone)]
pub struct ActionSynonyms {
    forms: BTreeMap<String, Action>,
    version: String,
    scanner: Regex,
}

impl ActionSynonyms {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_ACTIONS).expect("bundled action table parses")
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let blocks = parse_blocks(text)?;
        let mut forms = BTreeMap::<String, Action>::new();
        for block in blocks {
            let action: Action =
                block
                    .head
                    .parse()
                    .map_err(|_| LexiconError::UnknownAction {
                        line: block.line,
                        name: block.head.clone(),
                    })?;
            let all = std::iter::once((block.line, block.head)).chain(block.forms);
            for (line, form) in all {
                let key = form.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
                if let Some(existing) = forms.get(&key) {
                    if *existing != action {
                        return Err(LexiconError::Conflict {
                            line,
                            form: key,
                            existing: existing.to_string(),
                        });
                    }
                }
                forms.insert(key, action);
            }
        }
        let scanner = alternation(forms.keys());
        Ok(Self {
            forms,
            version: content_hash(text),
            scanner,
        })
    }

    /// Maps free text to an action using the longest synonym it contains.
    pub fn canonicalize(&self, raw: &str) -> Canonical<Action> {
        let mut best: Option<(usize, Action)> = None;
        for m in self.scanner.find_iter(raw) {
            let key = m.as_str().to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
            if let Some(&action) = self.forms.get(&key) {
                if best.is_none_or(|(len, _)| key.len() > len) {
                    best = Some((key.len(), action));
                }
            }
        }
        match best {
            Some((_, a)) => Canonical::Known(a),
            None => Canonical::Unknown,
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Every action mention in `text` as `(byte_start, byte_end, action)`.
    pub fn find_mentions(&self, text: &str) -> Vec<(usize, usize, Action)> {
        self.scanner
            .find_iter(text)
            .filter_map(|m| {
                let key = m.as_str().to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
                self.forms.get(&key).map(|&a| (m.start(), m.end(), a))
            })
            .collect()
    }
}

/// Both vocabularies, shared read-only across the pipeline.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub rooms: RoomLexicon,
    pub actions: ActionSynonyms,
}

impl Vocabulary {
    pub fn builtin() -> Self {
        Self {
            rooms: RoomLexicon::builtin(),
            actions: ActionSynonyms::builtin(),
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::builtin()
    }
}
