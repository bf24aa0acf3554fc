//! Pretext dataset container.
//!
//! `pretext.bin` starts with the 8-byte [`MAGIC`] and then holds one record
//! per example: a little-endian `u32` length followed by the example as JSON.
//! A JSON manifest sits next to it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PretextConfig, PretextExample};

pub const MAGIC: &[u8; 8] = b"VLNPT\x00\x01\x00";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a pretext file")]
    BadMagic { path: PathBuf },
    #[error("{path}: record {index} truncated")]
    Truncated { path: PathBuf, index: usize },
    #[error("{path}: record {index}: {source}")]
    Decode {
        path: PathBuf,
        index: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextManifest {
    pub schema_version: u32,
    pub examples: usize,
    pub counts: BTreeMap<String, usize>,
    pub pij_negatives: usize,
    pub source_pairs: usize,
    pub skipped: BTreeMap<String, usize>,
    pub config: PretextConfig,
    pub config_hash: String,
    pub feature_seed: u64,
}

impl PretextManifest {
    pub fn build(
        examples: &[PretextExample],
        skipped: &[(String, &'static str, super::PretextError)],
        config: &PretextConfig,
        config_hash: String,
        feature_seed: u64,
    ) -> Self {
        let mut counts = BTreeMap::new();
        let mut pij_negatives = 0;
        let mut sources = std::collections::BTreeSet::new();
        for ex in examples {
            *counts.entry(ex.task.name().to_string()).or_insert(0) += 1;
            if matches!(ex.task, super::PretextTask::Pij { is_paired: false }) {
                pij_negatives += 1;
            }
            sources.insert(ex.source_pair.as_str());
        }
        let mut skip_counts = BTreeMap::new();
        for (_, task, _) in skipped {
            *skip_counts.entry(task.to_string()).or_insert(0) += 1;
        }
        Self {
            schema_version: 1,
            examples: examples.len(),
            counts,
            pij_negatives,
            source_pairs: sources.len(),
            skipped: skip_counts,
            config: config.clone(),
            config_hash,
            feature_seed,
        }
    }
}

pub fn write_pretext(path: &Path, examples: &[PretextExample]) -> Result<(), StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    for ex in examples {
        let body = serde_json::to_vec(ex).expect("examples serialize");
        w.write_all(&(body.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&body).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_pretext(path: &Path) -> Result<Vec<PretextExample>, StoreError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    if !bytes.starts_with(MAGIC) {
        return Err(StoreError::BadMagic { path: path.to_path_buf() });
    }
    let mut pos = MAGIC.len();
    let mut out = Vec::new();
    while pos < bytes.len() {
        let index = out.len();
        let truncated = || StoreError::Truncated {
            path: path.to_path_buf(),
            index,
        };
        let len = u32::from_le_bytes(bytes.get(pos..pos + 4).ok_or_else(truncated)?.try_into().unwrap()) as usize;
        let body = bytes.get(pos + 4..pos + 4 + len).ok_or_else(truncated)?;
        out.push(serde_json::from_slice(body).map_err(|source| StoreError::Decode {
            path: path.to_path_buf(),
            index,
            source,
        })?);
        pos += 4 + len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    #[test]
    fn round_trip_with_features() {
        let provider = StubFeatures { regions: 2, dim: 4, seed: 0 };
        let nodes = (0..3).map(|i| FrameRef::new("v", i, 0.0)).collect();
        let seq = MultimodalSequence::layout(nodes, 2, vec!["go".into(), "left".into()]);
        let mut examples = vec![
            make_mlm(&seq, "a", 0.5, 1).unwrap(),
            make_mvm(&seq, "a", &provider, 0.5, 2).unwrap(),
        ];
        let (p, n) = make_pij(&seq, "a", 3).unwrap();
        examples.extend([p, n]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pretext.bin");
        write_pretext(&path, &examples).unwrap();
        assert_eq!(read_pretext(&path).unwrap(), examples);

        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_pretext(&path), Err(StoreError::BadMagic { .. })));
    }
}
