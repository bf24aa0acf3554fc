//! Dataset files.
//!
//! A dataset directory holds:
//!
//! * `pairs.jsonl`: emitted pairs, one `{"schema":1,"pair":{..}}` object per line
//! * `quarantine.jsonl`: rejected pairs kept for audit, same line format
//! * `manifest.json`: [`DatasetManifest`] computed over both files
//!
//! Reading recomputes the manifest and refuses a directory whose stored
//! counts disagree.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{FrameRef, Granularity, PairStatus, PathInstructionPair};

pub const SCHEMA_VERSION: u32 = 1;
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const QUARANTINE_FILE: &str = "quarantine.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: schema mismatch: {detail}")]
    SchemaMismatch { path: PathBuf, line: usize, detail: String },
    #[error("{path}: manifest disagrees with records ({detail})")]
    ManifestMismatch { path: PathBuf, detail: String },
    #[error("pair {0} is not verified and cannot be exported")]
    RejectedPairIncluded(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Train/validation video lists. Videos in neither list count as `other`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Split {
    pub fn of(&self, video_id: &str) -> &'static str {
        if self.val.iter().any(|v| v == video_id) {
            "val"
        } else if self.train.iter().any(|v| v == video_id) {
            "train"
        } else {
            "other"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// Distinct videos per split.
    pub videos: BTreeMap<String, usize>,
    pub pairs: usize,
    pub by_status: BTreeMap<String, usize>,
    pub by_granularity: BTreeMap<String, usize>,
    /// Verified / total, 0 for an empty dataset.
    pub pass_rate: f64,
    /// Attempts used → number of pairs.
    pub attempts_histogram: BTreeMap<u32, usize>,
    pub template_hashes: Vec<String>,
    pub split: Split,
    pub created_at_unix: u64,
}

impl DatasetManifest {
    /// The recomputable part, for comparing a stored manifest with records.
    fn counts_differ(&self, other: &Self) -> Option<String> {
        let checks = [
            ("schema_version", self.schema_version != other.schema_version),
            ("videos", self.videos != other.videos),
            ("pairs", self.pairs != other.pairs),
            ("by_status", self.by_status != other.by_status),
            ("by_granularity", self.by_granularity != other.by_granularity),
            ("pass_rate", self.pass_rate != other.pass_rate),
            ("attempts_histogram", self.attempts_histogram != other.attempts_histogram),
            ("template_hashes", self.template_hashes != other.template_hashes),
            ("split", self.split != other.split),
        ];
        checks.iter().find(|c| c.1).map(|c| c.0.to_string())
    }
}

fn status_name(s: PairStatus) -> &'static str {
    match s {
        PairStatus::Verified => "verified",
        PairStatus::Rejected => "rejected",
    }
}

/// Manifest over `pairs` with no split and a zero timestamp.
pub fn stats(pairs: &[PathInstructionPair]) -> DatasetManifest {
    stats_with(pairs, &Split::default(), 0)
}

pub fn stats_with(pairs: &[PathInstructionPair], split: &Split, created_at_unix: u64) -> DatasetManifest {
    let mut videos: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut by_status = BTreeMap::new();
    let mut by_granularity = BTreeMap::new();
    let mut attempts_histogram = BTreeMap::new();
    let mut templates = BTreeSet::new();
    for s in [PairStatus::Verified, PairStatus::Rejected] {
        by_status.insert(status_name(s).to_string(), 0);
    }
    for g in Granularity::ALL {
        by_granularity.insert(g.to_string(), 0);
    }
    for p in pairs {
        let video = p.trajectory().video_id();
        videos.entry(split.of(video)).or_default().insert(video);
        *by_status.entry(status_name(p.status()).to_string()).or_insert(0) += 1;
        *by_granularity
            .entry(p.instruction().granularity().to_string())
            .or_insert(0) += 1;
        *attempts_histogram
            .entry(p.verification().attempts_used)
            .or_insert(0) += 1;
        templates.insert(p.verification().template_version.clone());
    }
    let verified = by_status["verified"];
    DatasetManifest {
        schema_version: SCHEMA_VERSION,
        videos: ["train", "val", "other"]
            .iter()
            .map(|k| (k.to_string(), videos.get(k).map_or(0, BTreeSet::len)))
            .collect(),
        pairs: pairs.len(),
        by_status,
        by_granularity,
        pass_rate: if pairs.is_empty() { 0.0 } else { verified as f64 / pairs.len() as f64 },
        attempts_histogram,
        template_hashes: templates.into_iter().collect(),
        split: split.clone(),
        created_at_unix,
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    schema: u32,
    pair: &'a PathInstructionPair,
}

#[derive(Deserialize)]
struct RecordIn {
    schema: u32,
    pair: PathInstructionPair,
}

/// One record line, without the trailing newline.
pub fn encode_record(pair: &PathInstructionPair) -> String {
    serde_json::to_string(&RecordOut {
        schema: SCHEMA_VERSION,
        pair,
    })
    .expect("pairs serialize")
}

pub fn write_records(path: &Path, pairs: &[PathInstructionPair]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for p in pairs {
        writeln!(w, "{}", encode_record(p)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<PathInstructionPair>, DatasetError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mismatch = |detail: String| DatasetError::SchemaMismatch {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: RecordIn = serde_json::from_str(&line).map_err(|e| mismatch(e.to_string()))?;
        if rec.schema != SCHEMA_VERSION {
            return Err(mismatch(format!("schema {} (expected {SCHEMA_VERSION})", rec.schema)));
        }
        out.push(rec.pair);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct WriteOptions {
    pub split: Split,
    pub created_at_unix: u64,
}

/// Writes `pairs.jsonl`, `quarantine.jsonl` and `manifest.json` into `dir`,
/// creating it if needed. The manifest covers both record files.
pub fn write_dataset(
    dir: &Path,
    pairs: &[PathInstructionPair],
    quarantine: &[PathInstructionPair],
    opts: &WriteOptions,
) -> Result<DatasetManifest, DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_records(&dir.join(PAIRS_FILE), pairs)?;
    write_records(&dir.join(QUARANTINE_FILE), quarantine)?;
    let all: Vec<PathInstructionPair> = pairs.iter().chain(quarantine).cloned().collect();
    let manifest = stats_with(&all, &opts.split, opts.created_at_unix);
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<PathInstructionPair>,
    pub quarantine: Vec<PathInstructionPair>,
    pub manifest: DatasetManifest,
}

/// Reads a dataset directory. A missing quarantine file reads as empty.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let pairs = read_records(&dir.join(PAIRS_FILE))?;
    let qpath = dir.join(QUARANTINE_FILE);
    let quarantine = if qpath.exists() { read_records(&qpath)? } else { Vec::new() };
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::SchemaMismatch {
        path: mpath.clone(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::SchemaMismatch {
            path: mpath,
            line: 1,
            detail: format!("schema {} (expected {SCHEMA_VERSION})", manifest.schema_version),
        });
    }
    let all: Vec<PathInstructionPair> = pairs.iter().chain(&quarantine).cloned().collect();
    let recomputed = stats_with(&all, &manifest.split, manifest.created_at_unix);
    if let Some(detail) = manifest.counts_differ(&recomputed) {
        return Err(DatasetError::ManifestMismatch { path: mpath, detail });
    }
    Ok(Dataset {
        pairs,
        quarantine,
        manifest,
    })
}

/// Per-worker writer owning one shard file exclusively.
#[derive(Debug)]
pub struct ShardWriter {
    path: PathBuf,
    out: BufWriter<File>,
    written: usize,
}

impl ShardWriter {
    pub fn write(&mut self, pair: &PathInstructionPair) -> Result<(), DatasetError> {
        writeln!(self.out, "{}", encode_record(pair)).map_err(io_err(&self.path))?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    fn close(mut self) -> Result<PathBuf, DatasetError> {
        self.out.flush().map_err(io_err(&self.path))?;
        Ok(self.path)
    }
}

/// Opens `count` shard files next to `target` (`<target>.shard-NNNN`).
pub fn open_shards(target: &Path, count: usize) -> Result<Vec<ShardWriter>, DatasetError> {
    (0..count)
        .map(|i| {
            let path = PathBuf::from(format!("{}.shard-{i:04}", target.display()));
            let file = File::create(&path).map_err(io_err(&path))?;
            Ok(ShardWriter {
                path,
                out: BufWriter::new(file),
                written: 0,
            })
        })
        .collect()
}

/// Closes the shards and concatenates them into `target` in shard order,
/// removing the shard files. Returns the record count.
pub fn merge_shards(target: &Path, shards: Vec<ShardWriter>) -> Result<usize, DatasetError> {
    let mut total = 0;
    let mut out = BufWriter::new(File::create(target).map_err(io_err(target))?);
    for shard in shards {
        total += shard.written;
        let path = shard.close()?;
        let mut f = File::open(&path).map_err(io_err(&path))?;
        std::io::copy(&mut f, &mut out).map_err(io_err(target))?;
        std::fs::remove_file(&path).map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(target))?;
    Ok(total)
}

/// One entry of the R2R-style export. `path` lists node frame keys the way
/// R2R lists viewpoint ids, `scan` is the video id, and `heading` is always 0
/// since video frames carry no heading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2rRecord {
    pub path_id: usize,
    pub pair_id: String,
    pub scan: String,
    pub path: Vec<String>,
    pub frames: Vec<FrameRef>,
    pub heading: f64,
    pub instructions: Vec<String>,
    pub granularity: Granularity,
}

/// Writes a JSON array with one record per pair, room nodes only.
pub fn export_r2r_style(pairs: &[PathInstructionPair], path: &Path) -> Result<Vec<R2rRecord>, DatasetError> {
    if let Some(bad) = pairs.iter().find(|p| !p.is_verified()) {
        return Err(DatasetError::RejectedPairIncluded(bad.pair_id()));
    }
    let records: Vec<R2rRecord> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let frames: Vec<FrameRef> = p.trajectory().room_nodes().map(|n| n.frame.clone()).collect();
            R2rRecord {
                path_id: i,
                pair_id: p.pair_id(),
                scan: p.trajectory().video_id().to_string(),
                path: frames.iter().map(FrameRef::key).collect(),
                frames,
                heading: 0.0,
                instructions: vec![p.instruction().text().to_string()],
                granularity: p.instruction().granularity(),
            }
        })
        .collect();
    write_json(path, &records)?;
    Ok(records)
}

pub fn import_r2r_style(path: &Path) -> Result<Vec<R2rRecord>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::SchemaMismatch {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })
}
