//! Deterministic table-driven clients. They key on frame ids, so the whole
//! pipeline runs offline without any model.
//!
//! Label table (tab separated): `frame_key  room_type  confidence  objects`
//! where objects is a comma-separated list (may be empty).
//! Action table: `frame_key_a  frame_key_b  action`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use super::{ActionClient, ClientError, ImageInput, LabelClient};
use crate::lexicon::{Canonical, RoomLexicon};
use crate::model::{Action, RoomLabel};

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim_end_matches('\r');
        if l.trim().is_empty() || l.trim_start().starts_with('#') {
            None
        } else {
            Some((i + 1, l.split('\t').map(str::trim).collect()))
        }
    })
}

fn read(path: &Path) -> Result<String, TableError> {
    std::fs::read_to_string(path).map_err(|source| TableError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Default)]
pub struct StubLabelClient {
    table: HashMap<String, RoomLabel>,
}

impl StubLabelClient {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, RoomLabel)>) -> Self {
        Self {
            table: entries.into_iter().collect(),
        }
    }

    pub fn parse(text: &str, lexicon: &RoomLexicon) -> Result<Self, TableError> {
        let mut table = HashMap::new();
        for (line, f) in rows(text) {
            let err = |message: String| TableError::Line { line, message };
            if f.len() < 3 || f.len() > 4 {
                return Err(err("expected key, room_type, confidence[, objects]".into()));
            }
            let Canonical::Known(room) = lexicon.canonicalize(f[1]) else {
                return Err(err(format!("room {:?} not in lexicon", f[1])));
            };
            let conf: f64 = f[2].parse().map_err(|_| err(format!("bad confidence {:?}", f[2])))?;
            let objects = f
                .get(3)
                .map(|o| o.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect::<Vec<_>>())
                .unwrap_or_default();
            let label = RoomLabel::new(room, objects, conf).map_err(|e| err(e.to_string()))?;
            table.insert(f[0].to_string(), label);
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path, lexicon: &RoomLexicon) -> Result<Self, TableError> {
        Self::parse(&read(path)?, lexicon)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl LabelClient for StubLabelClient {
    fn label(&self, image: ImageInput<'_>) -> Result<RoomLabel, ClientError> {
        self.table
            .get(image.key)
            .cloned()
            .ok_or_else(|| ClientError::BadResponse(format!("no stub label for {}", image.key)))
    }
}

fn hashed_move(a: &str, b: &str) -> Action {
    let digest = Sha256::digest(format!("{a}\u{1f}{b}").as_bytes());
    Action::MOVES[digest[0] as usize % Action::MOVES.len()]
}

/// Table lookup with a hash-of-keys fallback for unlisted pairs. Both
/// directions of a pair are independent entries.
#[derive(Debug, Clone, Default)]
pub struct StubActionClient {
    table: HashMap<(String, String), Action>,
}

impl StubActionClient {
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let mut table = HashMap::new();
        for (line, f) in rows(text) {
            let err = |message: String| TableError::Line { line, message };
            let [a, b, act] = f[..] else {
                return Err(err("expected key_a, key_b, action".into()));
            };
            let action: Action = act.parse().map_err(|_| err(format!("bad action {act:?}")))?;
            if action == Action::Stop {
                return Err(err("Stop is never an inferred action".into()));
            }
            table.insert((a.to_string(), b.to_string()), action);
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path) -> Result<Self, TableError> {
        Self::parse(&read(path)?)
    }
}

impl ActionClient for StubActionClient {
    fn infer(&self, a: ImageInput<'_>, b: ImageInput<'_>) -> Result<Action, ClientError> {
        Ok(self
            .table
            .get(&(a.key.to_string(), b.key.to_string()))
            .copied()
            .unwrap_or_else(|| hashed_move(a.key, b.key)))
    }
}

/// Action client driven by an explicit script, counting its calls.
#[derive(Debug, Default)]
pub struct ScriptedActionClient {
    script: HashMap<(String, String), Action>,
    fallback: Option<Action>,
    calls: AtomicUsize,
}

impl ScriptedActionClient {
    pub fn constant(action: Action) -> Self {
        Self {
            fallback: Some(action),
            ..Default::default()
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = ((String, String), Action)>) -> Self {
        Self {
            script: pairs.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ActionClient for ScriptedActionClient {
    fn infer(&self, a: ImageInput<'_>, b: ImageInput<'_>) -> Result<Action, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.script
            .get(&(a.key.to_string(), b.key.to_string()))
            .copied()
            .or(self.fallback)
            .ok_or_else(|| ClientError::BadResponse(format!("no scripted action for {} -> {}", a.key, b.key)))
    }
}
