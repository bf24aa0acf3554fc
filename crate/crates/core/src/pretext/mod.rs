//! Pretext-task examples (MLM, MVM, PIJ, PR) built from verified pairs.
//!
//! A [`MultimodalSequence`] lays out the visual side as one `Img` marker per
//! room node followed by that node's `n` region tokens, and the text side as
//! `Cls w_1 .. w_T Sep`. Region features are not copied into sequences; they
//! are fetched from the [`FeatureProvider`] by frame when needed.

mod store;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use store::{read_pretext, write_pretext, PretextManifest, StoreError, MAGIC};

use crate::model::{FrameRef, PathInstructionPair};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PretextError {
    #[error("feature provider unavailable for {key}: {reason}")]
    FeatureProviderUnavailable { key: String, reason: String },
    #[error("pair {0} is not verified")]
    NotVerified(String),
    #[error("no non-identity node permutation changes the sequence")]
    DegenerateTrajectory,
    #[error("only {available} distinct distractors available, {needed} needed")]
    InsufficientDistractors { needed: usize, available: usize },
    #[error("pretext config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorKind {
    Shuffle,
    Truncate,
    Substitute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretextConfig {
    /// Regions per room node.
    pub regions: usize,
    /// Feature dimension.
    pub dim: usize,
    pub mask_prob: f64,
    pub pr_candidates: usize,
    pub pr_kinds: Vec<DistractorKind>,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            regions: 36,
            dim: 2048,
            mask_prob: 0.15,
            pr_candidates: 4,
            pr_kinds: vec![DistractorKind::Shuffle, DistractorKind::Truncate, DistractorKind::Substitute],
            seed: 0,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<(), PretextError> {
        if self.regions == 0 || self.dim == 0 {
            return Err(PretextError::Config("regions and dim must be positive".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(PretextError::Config(format!("mask_prob {} outside (0, 1)", self.mask_prob)));
        }
        if self.pr_candidates < 2 {
            return Err(PretextError::Config("pr_candidates must be at least 2".into()));
        }
        if self.pr_kinds.is_empty() {
            return Err(PretextError::Config("pr_kinds is empty".into()));
        }
        Ok(())
    }
}

/// Source of `n × d` region features for a frame.
pub trait FeatureProvider: Send + Sync {
    fn regions(&self) -> usize;
    fn dim(&self) -> usize;
    fn features(&self, frame: &FrameRef) -> Result<Vec<Vec<f32>>, PretextError>;
}

/// Pseudo-features seeded by `sha256(frame key, seed)`, uniform in [-1, 1).
#[derive(Debug, Clone)]
pub struct StubFeatures {
    pub regions: usize,
    pub dim: usize,
    pub seed: u64,
}

impl FeatureProvider for StubFeatures {
    fn regions(&self) -> usize {
        self.regions
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, frame: &FrameRef) -> Result<Vec<Vec<f32>>, PretextError> {
        let mut h = Sha256::new();
        h.update(frame.key().as_bytes());
        h.update(self.seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        Ok((0..self.regions)
            .map(|_| (0..self.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect())
    }
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercases and splits on anything that is not a letter or digit.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum VisualToken {
    Img { node: usize },
    Region { node: usize, region: usize },
    Mask { node: usize, region: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "t", content = "w", rename_all = "snake_case")]
pub enum TextToken {
    Cls,
    Word(String),
    Sep,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSequence {
    /// Room-node frames in block order; `node` fields index into this.
    pub nodes: Vec<FrameRef>,
    pub regions: usize,
    pub visual_tokens: Vec<VisualToken>,
    pub text_tokens: Vec<TextToken>,
}

impl MultimodalSequence {
    /// Lays out `nodes` and `words` without consulting a feature provider.
    pub fn layout(nodes: Vec<FrameRef>, regions: usize, words: Vec<String>) -> Self {
        let visual_tokens = (0..nodes.len())
            .flat_map(|node| {
                std::iter::once(VisualToken::Img { node }).chain((0..regions).map(move |region| VisualToken::Region { node, region }))
            })
            .collect();
        let text_tokens = std::iter::once(TextToken::Cls)
            .chain(words.into_iter().map(TextToken::Word))
            .chain(std::iter::once(TextToken::Sep))
            .collect();
        Self {
            nodes,
            regions,
            visual_tokens,
            text_tokens,
        }
    }

    pub fn words(&self) -> Vec<String> {
        self.text_tokens
            .iter()
            .filter_map(|t| match t {
                TextToken::Word(w) => Some(w.clone()),
                _ => None,
            })
            .collect()
    }

    /// Same words, nodes rearranged.
    pub fn with_nodes(&self, nodes: Vec<FrameRef>) -> Self {
        Self::layout(nodes, self.regions, self.words())
    }

    pub fn node_keys(&self) -> Vec<String> {
        self.nodes.iter().map(FrameRef::key).collect()
    }

    /// Checks the layout invariants, returning the first violation.
    pub fn check_layout(&self) -> Result<(), String> {
        let k = self.nodes.len();
        let stride = self.regions + 1;
        if self.visual_tokens.len() != k * stride {
            return Err(format!("visual length {} != {k}·{stride}", self.visual_tokens.len()));
        }
        for (i, t) in self.visual_tokens.iter().enumerate() {
            let is_img = matches!(t, VisualToken::Img { .. });
            if is_img != (i % stride == 0) {
                return Err(format!("visual position {i}: Img marker misplaced"));
            }
            let node = match t {
                VisualToken::Img { node } | VisualToken::Region { node, .. } | VisualToken::Mask { node, .. } => *node,
            };
            if node != i / stride {
                return Err(format!("visual position {i}: belongs to node {node}"));
            }
        }
        let n = self.text_tokens.len();
        if n < 2 || self.text_tokens[0] != TextToken::Cls || self.text_tokens[n - 1] != TextToken::Sep {
            return Err("text must be framed by Cls and Sep".into());
        }
        if self.text_tokens[1..n - 1]
            .iter()
            .any(|t| matches!(t, TextToken::Cls | TextToken::Sep))
        {
            return Err("Cls/Sep inside the text".into());
        }
        Ok(())
    }
}

fn f32_b64<S: serde::Serializer>(v: &[Vec<f32>], s: S) -> Result<S::Ok, S::Error> {
    use base64::Engine;
    let encoded: Vec<String> = v
        .iter()
        .map(|row| {
            let bytes: Vec<u8> = row.iter().flat_map(|x| x.to_le_bytes()).collect();
            base64::engine::general_purpose::STANDARD.encode(bytes)
        })
        .collect();
    encoded.serialize(s)
}

fn f32_b64_de<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<Vec<f32>>, D::Error> {
    use base64::Engine;
    let encoded = Vec::<String>::deserialize(d)?;
    encoded
        .iter()
        .map(|e| {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(e)
                .map_err(serde::de::Error::custom)?;
            if bytes.len() % 4 != 0 {
                return Err(serde::de::Error::custom("feature row is not a whole number of f32"));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum PretextTask {
    Mlm {
        /// Indices into `text_tokens`.
        positions: Vec<usize>,
        originals: Vec<String>,
    },
    Mvm {
        /// Indices into `visual_tokens`.
        positions: Vec<usize>,
        #[serde(serialize_with = "f32_b64", deserialize_with = "f32_b64_de")]
        originals: Vec<Vec<f32>>,
    },
    Pij {
        is_paired: bool,
    },
    Pr {
        /// Node orders of the candidate paths.
        candidates: Vec<Vec<FrameRef>>,
        gold_index: usize,
    },
}

impl PretextTask {
    pub fn name(&self) -> &'static str {
        match self {
            PretextTask::Mlm { .. } => "mlm",
            PretextTask::Mvm { .. } => "mvm",
            PretextTask::Pij { .. } => "pij",
            PretextTask::Pr { .. } => "pr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextExample {
    pub source_pair: String,
    pub seed: u64,
    pub sequence: MultimodalSequence,
    pub task: PretextTask,
}

/// Builds the sequence for a verified pair. Every room-node frame is checked
/// against the provider so failures surface here rather than at training
/// time.
pub fn assemble(
    pair: &PathInstructionPair,
    features: &dyn FeatureProvider,
    tokenizer: &dyn Tokenizer,
) -> Result<MultimodalSequence, PretextError> {
    if !pair.is_verified() {
        return Err(PretextError::NotVerified(pair.pair_id()));
    }
    let nodes: Vec<FrameRef> = pair.trajectory().room_nodes().map(|n| n.frame.clone()).collect();
    for frame in &nodes {
        let f = features.features(frame)?;
        if f.len() != features.regions() || f.iter().any(|r| r.len() != features.dim()) {
            return Err(PretextError::FeatureProviderUnavailable {
                key: frame.key(),
                reason: "feature block has the wrong shape".into(),
            });
        }
        if f.iter().flatten().any(|x| !x.is_finite()) {
            return Err(PretextError::FeatureProviderUnavailable {
                key: frame.key(),
                reason: "non-finite feature value".into(),
            });
        }
    }
    Ok(MultimodalSequence::layout(
        nodes,
        features.regions(),
        tokenizer.tokenize(pair.instruction().text()),
    ))
}

/// Derives a per-example seed from the run seed, the pair and the task.
pub fn example_seed(seed: u64, pair_id: &str, task: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(pair_id.as_bytes());
    h.update([0]);
    h.update(task.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn choose_masked(maskable: &[usize], mask_prob: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = maskable.iter().copied().filter(|_| rng.random_bool(mask_prob)).collect();
    if picked.is_empty() && !maskable.is_empty() {
        picked.push(maskable[rng.random_range(0..maskable.len())]);
    }
    picked
}

fn check_mask_prob(mask_prob: f64) -> Result<(), PretextError> {
    if mask_prob > 0.0 && mask_prob < 1.0 {
        Ok(())
    } else {
        Err(PretextError::Config(format!("mask_prob {mask_prob} outside (0, 1)")))
    }
}

pub fn make_mlm(seq: &MultimodalSequence, source: &str, mask_prob: f64, seed: u64) -> Result<PretextExample, PretextError> {
    check_mask_prob(mask_prob)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maskable: Vec<usize> = seq
        .text_tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t, TextToken::Word(_)))
        .map(|(i, _)| i)
        .collect();
    let positions = choose_masked(&maskable, mask_prob, &mut rng);
    let mut sequence = seq.clone();
    let mut originals = Vec::with_capacity(positions.len());
    for &p in &positions {
        if let TextToken::Word(w) = std::mem::replace(&mut sequence.text_tokens[p], TextToken::Mask) {
            originals.push(w);
        }
    }
    Ok(PretextExample {
        source_pair: source.to_string(),
        seed,
        sequence,
        task: PretextTask::Mlm { positions, originals },
    })
}

pub fn make_mvm(
    seq: &MultimodalSequence,
    source: &str,
    features: &dyn FeatureProvider,
    mask_prob: f64,
    seed: u64,
) -> Result<PretextExample, PretextError> {
    check_mask_prob(mask_prob)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maskable: Vec<usize> = seq
        .visual_tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t, VisualToken::Region { .. }))
        .map(|(i, _)| i)
        .collect();
    let positions = choose_masked(&maskable, mask_prob, &mut rng);
    let mut sequence = seq.clone();
    let mut originals = Vec::with_capacity(positions.len());
    let mut cache: Vec<Option<Vec<Vec<f32>>>> = vec![None; seq.nodes.len()];
    for &p in &positions {
        let VisualToken::Region { node, region } = sequence.visual_tokens[p] else {
            unreachable!("only region positions are maskable")
        };
        if cache[node].is_none() {
            cache[node] = Some(features.features(&seq.nodes[node])?);
        }
        originals.push(cache[node].as_ref().unwrap()[region].clone());
        sequence.visual_tokens[p] = VisualToken::Mask { node, region };
    }
    Ok(PretextExample {
        source_pair: source.to_string(),
        seed,
        sequence,
        task: PretextTask::Mvm { positions, originals },
    })
}

/// A seeded permutation of `keys` that changes the sequence, as an index
/// order. `None` when every key is identical.
fn changing_permutation(keys: &[String], rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.shuffle(rng);
    if order.iter().enumerate().all(|(i, &j)| keys[i] == keys[j]) {
        order = (0..keys.len()).collect();
        let (i, j) = (0..keys.len())
            .flat_map(|i| (i + 1..keys.len()).map(move |j| (i, j)))
            .find(|&(i, j)| keys[i] != keys[j])?;
        order.swap(i, j);
    }
    Some(order)
}

/// Positive (the sequence itself) and negative (room-node blocks permuted)
/// path-instruction judgment examples.
pub fn make_pij(seq: &MultimodalSequence, source: &str, seed: u64) -> Result<(PretextExample, PretextExample), PretextError> {
    let keys = seq.node_keys();
    if keys.len() < 2 {
        return Err(PretextError::DegenerateTrajectory);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = changing_permutation(&keys, &mut rng).ok_or(PretextError::DegenerateTrajectory)?;
    let negative = seq.with_nodes(order.iter().map(|&i| seq.nodes[i].clone()).collect());
    let example = |sequence, is_paired| PretextExample {
        source_pair: source.to_string(),
        seed,
        sequence,
        task: PretextTask::Pij { is_paired },
    };
    Ok((example(seq.clone(), true), example(negative, false)))
}

fn distractor_pool(
    gold: &[FrameRef],
    others: &[&[FrameRef]],
    kinds: &[DistractorKind],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<FrameRef>> {
    let keys = |v: &[FrameRef]| v.iter().map(FrameRef::key).collect::<Vec<_>>();
    let gold_keys = keys(gold);
    let mut seen: HashSet<Vec<String>> = HashSet::from([gold_keys.clone()]);
    let mut pool = Vec::new();
    let mut offer = |cand: Vec<FrameRef>, pool: &mut Vec<Vec<FrameRef>>| {
        if !cand.is_empty() && seen.insert(keys(&cand)) {
            pool.push(cand);
        }
    };
    for kind in kinds {
        match kind {
            DistractorKind::Shuffle => {
                for _ in 0..8 {
                    if let Some(order) = changing_permutation(&gold_keys, rng) {
                        offer(order.iter().map(|&i| gold[i].clone()).collect(), &mut pool);
                    }
                }
            }
            DistractorKind::Truncate => {
                if gold.len() >= 2 {
                    offer(gold[..gold.len() - 1].to_vec(), &mut pool);
                    offer(gold[1..].to_vec(), &mut pool);
                }
            }
            DistractorKind::Substitute => {
                let donors: Vec<&FrameRef> = others
                    .iter()
                    .flat_map(|o| o.iter())
                    .filter(|f| !gold_keys.contains(&f.key()))
                    .collect();
                if donors.is_empty() {
                    continue;
                }
                for _ in 0..(2 * gold.len()).max(4) {
                    let pos = rng.random_range(0..gold.len());
                    let donor = donors[rng.random_range(0..donors.len())];
                    let mut cand = gold.to_vec();
                    cand[pos] = donor.clone();
                    offer(cand, &mut pool);
                }
            }
        }
    }
    pool
}

/// Path-ranking example: the gold node order plus `k − 1` distinct
/// distractors, with the gold placed at a seeded index. `batch` supplies
/// donor nodes for substitution distractors; sequences with the gold's own
/// frames are ignored as donors.
pub fn make_pr(
    seq: &MultimodalSequence,
    source: &str,
    batch: &[&MultimodalSequence],
    k: usize,
    kinds: &[DistractorKind],
    seed: u64,
) -> Result<PretextExample, PretextError> {
    if k < 2 {
        return Err(PretextError::Config("path ranking needs k >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others: Vec<&[FrameRef]> = batch
        .iter()
        .filter(|s| s.node_keys() != seq.node_keys())
        .map(|s| s.nodes.as_slice())
        .collect();
    let mut pool = distractor_pool(&seq.nodes, &others, kinds, &mut rng);
    if pool.len() < k - 1 {
        return Err(PretextError::InsufficientDistractors {
            needed: k - 1,
            available: pool.len(),
        });
    }
    pool.shuffle(&mut rng);
    pool.truncate(k - 1);
    let gold_index = rng.random_range(0..k);
    pool.insert(gold_index, seq.nodes.clone());
    Ok(PretextExample {
        source_pair: source.to_string(),
        seed,
        sequence: seq.clone(),
        task: PretextTask::Pr {
            candidates: pool,
            gold_index,
        },
    })
}

/// Pair id, task name and reason.
pub type Skipped = (String, &'static str, PretextError);

/// Outcome of building a batch: examples in pair order, plus pairs skipped
/// for a task with the reason.
#[derive(Debug, Default)]
pub struct PretextBatch {
    pub examples: Vec<PretextExample>,
    pub skipped: Vec<Skipped>,
}

/// Builds MLM, MVM, PIJ (positive and negative) and PR examples for every
/// verified pair. Rejected pairs are ignored. Output order follows `pairs`
/// regardless of the worker count.
pub fn build_batch(
    pairs: &[PathInstructionPair],
    features: &dyn FeatureProvider,
    tokenizer: &dyn Tokenizer,
    cfg: &PretextConfig,
) -> Result<PretextBatch, PretextError> {
    cfg.validate()?;
    let verified: Vec<&PathInstructionPair> = pairs.iter().filter(|p| p.is_verified()).collect();
    let seqs: Vec<(String, MultimodalSequence)> = verified
        .par_iter()
        .map(|p| Ok((p.pair_id(), assemble(p, features, tokenizer)?)))
        .collect::<Result<_, PretextError>>()?;
    let all: Vec<&MultimodalSequence> = seqs.iter().map(|(_, s)| s).collect();
    let per_pair: Vec<(Vec<PretextExample>, Vec<Skipped>)> = seqs
        .par_iter()
        .map(|(id, seq)| {
            let mut out = Vec::new();
            let mut skipped = Vec::new();
            let seed = |task| example_seed(cfg.seed, id, task);
            out.push(make_mlm(seq, id, cfg.mask_prob, seed("mlm"))?);
            out.push(make_mvm(seq, id, features, cfg.mask_prob, seed("mvm"))?);
            match make_pij(seq, id, seed("pij")) {
                Ok((pos, neg)) => out.extend([pos, neg]),
                Err(e) => skipped.push((id.clone(), "pij", e)),
            }
            match make_pr(seq, id, &all, cfg.pr_candidates, &cfg.pr_kinds, seed("pr")) {
                Ok(ex) => out.push(ex),
                Err(e) => skipped.push((id.clone(), "pr", e)),
            }
            Ok((out, skipped))
        })
        .collect::<Result<_, PretextError>>()?;
    let mut batch = PretextBatch::default();
    for (examples, skipped) in per_pair {
        batch.examples.extend(examples);
        batch.skipped.extend(skipped);
    }
    Ok(batch)
}
