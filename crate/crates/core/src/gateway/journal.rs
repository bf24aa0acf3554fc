//! Append-only exchange journal and the replay backend built on it.
//!
//! File layout: a sequence of records, each a little-endian `u32` byte length
//! followed by that many bytes of JSON.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Completion, CompletionBackend, Corruption, SendError, Usage};
use crate::prompt::Prompt;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("journal {path}: record at byte {offset} is truncated")]
    Truncated { path: PathBuf, offset: u64 },
    #[error("journal {path}: record at byte {offset}: {source}")]
    Decode {
        path: PathBuf,
        offset: u64,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    /// `sha256(request_hash, attempt)`.
    pub key: String,
    pub request_hash: String,
    pub attempt: u32,
    pub prompt: Prompt,
    pub model_id: String,
    pub text: String,
    pub usage: Usage,
    #[serde(default)]
    pub corruptions: Vec<Corruption>,
}

pub fn exchange_key(request_hash: &str, attempt: u32) -> String {
    let mut h = Sha256::new();
    h.update(request_hash.as_bytes());
    h.update(attempt.to_le_bytes());
    hex::encode(h.finalize())
}

impl JournalRecord {
    pub fn new(prompt: &Prompt, attempt: u32, completion: &Completion) -> Self {
        let request_hash = prompt.request_hash();
        Self {
            key: exchange_key(&request_hash, attempt),
            request_hash,
            attempt,
            prompt: prompt.clone(),
            model_id: completion.model_id.clone(),
            text: completion.text.clone(),
            usage: completion.usage.clone(),
            corruptions: completion.corruptions.clone(),
        }
    }
}

pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    pub fn open(path: &Path) -> Result<Self, JournalError> {
        let io = |source| JournalError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    /// Appends one record with a single write so concurrent appenders never
    /// interleave.
    pub fn append(&self, record: &JournalRecord) -> Result<(), JournalError> {
        let body = serde_json::to_vec(record).expect("journal records serialize");
        let mut buf = Vec::with_capacity(body.len() + 4);
        buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
        buf.extend_from_slice(&body);
        let mut file = self.file.lock().unwrap();
        file.write_all(&buf).map_err(|source| JournalError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<JournalRecord>, JournalError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| JournalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let mut records = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let truncated = || JournalError::Truncated {
            path: path.to_path_buf(),
            offset: pos as u64,
        };
        let len_bytes: [u8; 4] = bytes.get(pos..pos + 4).ok_or_else(truncated)?.try_into().unwrap();
        let len = u32::from_le_bytes(len_bytes) as usize;
        let body = bytes.get(pos + 4..pos + 4 + len).ok_or_else(truncated)?;
        let record = serde_json::from_slice(body).map_err(|source| JournalError::Decode {
            path: path.to_path_buf(),
            offset: pos as u64,
            source,
        })?;
        records.push(record);
        pos += 4 + len;
    }
    Ok(records)
}

/// Answers from a journal instead of a live backend.
pub(super) struct ReplayBackend {
    records: HashMap<String, JournalRecord>,
    model_id: String,
}

impl ReplayBackend {
    pub(super) fn load(path: &Path) -> Result<Self, JournalError> {
        let records = read_journal(path)?;
        let model_id = records
            .first()
            .map(|r| format!("replay:{}", r.model_id))
            .unwrap_or_else(|| "replay".to_string());
        Ok(Self {
            records: records.into_iter().map(|r| (r.key.clone(), r)).collect(),
            model_id,
        })
    }
}

impl CompletionBackend for ReplayBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn send(&self, prompt: &Prompt, attempt: u32) -> Result<Completion, SendError> {
        let key = exchange_key(&prompt.request_hash(), attempt);
        let r = self.records.get(&key).ok_or(SendError::ReplayMiss(key))?;
        Ok(Completion {
            text: r.text.clone(),
            model_id: r.model_id.clone(),
            usage: r.usage.clone(),
            sends: 0,
            corruptions: r.corruptions.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: u32) -> JournalRecord {
        let prompt = Prompt {
            system_text: "sys".into(),
            user_text: format!("user {i}"),
            images: vec![],
            template_id: "extraction".into(),
            template_version: "v".into(),
        };
        let completion = Completion {
            text: format!("answer {i}"),
            model_id: "m".into(),
            usage: Usage::default(),
            sends: 1,
            corruptions: vec![],
        };
        JournalRecord::new(&prompt, 1, &completion)
    }

    #[test]
    fn append_then_read_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.bin");
        let j = Journal::open(&path).unwrap();
        for i in 0..5 {
            j.append(&record(i)).unwrap();
        }
        let back = read_journal(&path).unwrap();
        assert_eq!(back, (0..5).map(record).collect::<Vec<_>>());

        let replay = ReplayBackend::load(&path).unwrap();
        let hit = replay.send(&back[3].prompt, 1).unwrap();
        assert_eq!(hit.text, "answer 3");
        assert!(matches!(replay.send(&back[3].prompt, 2), Err(SendError::ReplayMiss(_))));
    }

    #[test]
    fn truncated_tail_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.bin");
        Journal::open(&path).unwrap().append(&record(0)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_journal(&path), Err(JournalError::Truncated { offset: 0, .. })));
    }
}
