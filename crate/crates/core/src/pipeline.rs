//! Stage orchestration over an output directory.
//!
//! ```text
//! <out>/trajectories.jsonl        sample
//! <out>/dataset/                  generate
//! <out>/reverified/               verify
//! <out>/pretext/pretext.bin       pretext
//! <out>/pretext/manifest.json
//! <out>/export/r2r.json           export
//! <out>/run.json                  every stage
//! ```
//!
//! Work inside a stage runs on a rayon pool capped by `jobs`; results are
//! collected in input order so outputs do not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AdapterConfig, ConfigError, PipelineConfig};
use crate::dataset::{self, DatasetError, DatasetManifest, WriteOptions};
use crate::frames::{load_videos, DirImageStore, ImageStore, VideoDir};
use crate::gateway::{BackendConfig, Gateway, GatewayError, GatewayStats};
use crate::grounding::{
    ground_actions, label_nodes, ActionClient, CachedLabeler, GroundingError, HttpActionClient,
    HttpLabelClient, LabelClient, StubActionClient, StubLabelClient,
};
use crate::lexicon::{ActionSynonyms, RoomLexicon, Vocabulary};
use crate::model::{Granularity, PathInstructionPair, Trajectory};
use crate::pretext::{self, PretextManifest, StubFeatures, WordTokenizer};
use crate::prompt::TemplateSet;
use crate::sampler::{annotate_frames, sample_many, SamplerError};
use crate::verify::{RuleSet, Verifier, VerifyError};

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const DATASET_DIR: &str = "dataset";
pub const REVERIFIED_DIR: &str = "reverified";
pub const PRETEXT_DIR: &str = "pretext";
pub const PRETEXT_FILE: &str = "pretext.bin";
pub const EXPORT_FILE: &str = "export/r2r.json";
pub const RUN_RECORD_FILE: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Sample,
    Generate,
    Verify,
    Pretext,
    Export,
    Stats,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("unit variant"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("[{stage}] config error: {message}")]
    Config { stage: Stage, message: String },
    #[error("[{stage}] {kind}: {message}")]
    Failed {
        stage: Stage,
        kind: &'static str,
        message: String,
    },
}

impl PipelineError {
    pub fn config(stage: Stage, message: impl Into<String>) -> Self {
        PipelineError::Config {
            stage,
            message: message.into(),
        }
    }

    fn failed(stage: Stage, kind: &'static str, err: impl fmt::Display) -> Self {
        PipelineError::Failed {
            stage,
            kind,
            message: err.to_string(),
        }
    }

    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Config { stage, .. } | PipelineError::Failed { stage, .. } => *stage,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } => 2,
            PipelineError::Failed { .. } => 3,
        }
    }

    /// Machine-readable form for stderr.
    pub fn summary(&self) -> serde_json::Value {
        let (error, kind, message) = match self {
            PipelineError::Config { message, .. } => ("ConfigError", "ConfigError", message.as_str()),
            PipelineError::Failed { kind, message, .. } => ("PipelineError", *kind, message.as_str()),
        };
        serde_json::json!({
            "error": error,
            "kind": kind,
            "stage": self.stage(),
            "message": message,
            "exit_code": self.exit_code(),
        })
    }
}

impl From<(Stage, ConfigError)> for PipelineError {
    fn from((stage, e): (Stage, ConfigError)) -> Self {
        PipelineError::config(stage, e.message)
    }
}

fn gateway_kind(e: &GatewayError) -> &'static str {
    match e {
        GatewayError::BackendTimeout { .. } => "BackendTimeout",
        GatewayError::BackendRejected { .. } => "BackendRejected",
        GatewayError::RetriesExhausted { .. } => "RetriesExhausted",
        GatewayError::Config(_) => "GatewayConfig",
        GatewayError::ReplayMiss(_) => "ReplayMiss",
        GatewayError::Journal(_) => "JournalError",
    }
}

fn verify_kind(e: &VerifyError) -> &'static str {
    match e {
        VerifyError::Gateway(g) => gateway_kind(g),
        VerifyError::NotGrounded(_) => "NotGrounded",
        VerifyError::Prompt(_) => "PromptError",
        VerifyError::NonConvergent(_) => "NonConvergent",
        VerifyError::EmptyCompletion { .. } => "EmptyCompletion",
        VerifyError::Model(_) => "ModelError",
        VerifyError::Config(_) => "VerifyConfig",
    }
}

fn grounding_kind(e: &GroundingError) -> &'static str {
    match e {
        GroundingError::LabelerUnavailable { .. } => "LabelerUnavailable",
        GroundingError::ActionClientUnavailable { .. } => "ActionClientUnavailable",
        GroundingError::StopFromClient => "StopFromClient",
        GroundingError::PreconditionViolated(_) => "PreconditionViolated",
        GroundingError::Frame(_) => "FrameError",
        GroundingError::Model(_) => "ModelError",
    }
}

fn dataset_err(stage: Stage) -> impl Fn(DatasetError) -> PipelineError {
    move |e| {
        let kind = match &e {
            DatasetError::Io { .. } => "IoError",
            DatasetError::SchemaMismatch { .. } => "SchemaMismatch",
            DatasetError::ManifestMismatch { .. } => "ManifestMismatch",
            DatasetError::RejectedPairIncluded(_) => "RejectedPairIncluded",
        };
        PipelineError::failed(stage, kind, e)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker cap; defaults to the available parallelism.
    pub jobs: Option<usize>,
    pub dry_run: bool,
}

/// Result of one stage: the files it wrote and a few counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Option<Stage>,
    pub outputs: Vec<PathBuf>,
    pub counts: BTreeMap<String, u64>,
    /// Filled instead of `outputs` on a dry run.
    pub planned: Vec<String>,
}

impl StageReport {
    fn new(stage: Stage) -> Self {
        Self {
            stage: Some(stage),
            ..Self::default()
        }
    }

    fn count(mut self, k: &str, v: usize) -> Self {
        self.counts.insert(k.to_string(), v as u64);
        self
    }
}

/// Everything needed to reproduce a run's outputs with mock backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub stages: Vec<StageReport>,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub template_version: String,
    pub cleanup_rules_version: String,
    pub room_lexicon_version: String,
    pub action_lexicon_version: String,
    pub model_id: Option<String>,
    pub gateway_calls: Option<BTreeMap<String, u64>>,
}

/// Loaded lexicons, templates, cleanup rules and frame directories.
pub struct Resources {
    pub vocab: Vocabulary,
    pub templates: TemplateSet,
    pub rules: RuleSet,
    pub videos: Vec<VideoDir>,
    pub images: Arc<DirImageStore>,
}

impl Resources {
    pub fn load(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let c = |e: &dyn fmt::Display| PipelineError::config(Stage::Config, e.to_string());
        let rooms = match &cfg.paths.rooms_lexicon {
            Some(p) => RoomLexicon::load(p).map_err(|e| c(&e))?,
            None => RoomLexicon::builtin(),
        };
        let actions = match &cfg.paths.actions_lexicon {
            Some(p) => ActionSynonyms::load(p).map_err(|e| c(&e))?,
            None => ActionSynonyms::builtin(),
        };
        let templates = match &cfg.paths.templates {
            Some(p) => TemplateSet::load_dir(p).map_err(|e| c(&e))?,
            None => TemplateSet::builtin(),
        };
        let rules = match &cfg.paths.cleanup_rules {
            Some(p) => RuleSet::load(p).map_err(|e| c(&e))?,
            None => RuleSet::builtin(),
        };
        let videos = load_videos(&cfg.paths.videos).map_err(|e| c(&e))?;
        let images = Arc::new(DirImageStore::new(&videos));
        Ok(Self {
            vocab: Vocabulary { rooms, actions },
            templates,
            rules,
            videos,
            images,
        })
    }
}

type Clients = (Arc<dyn LabelClient>, Arc<dyn ActionClient>);

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub res: Resources,
    pub opts: RunOptions,
    pool: rayon::ThreadPool,
    gateway: Option<Gateway>,
    stages: Vec<StageReport>,
}

fn out_path(cfg: &PipelineConfig, rel: &str) -> PathBuf {
    cfg.paths.out.join(rel)
}

fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Rec<'a> {
        schema: u32,
        trajectory: &'a Trajectory,
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for t in trajs {
        let line = serde_json::to_string(&Rec {
            schema: dataset::SCHEMA_VERSION,
            trajectory: t,
        })
        .expect("trajectories serialize");
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, DatasetError> {
    #[derive(Deserialize)]
    struct Rec {
        schema: u32,
        trajectory: Trajectory,
    }
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mismatch = |detail: String| DatasetError::SchemaMismatch {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: Rec = serde_json::from_str(&line).map_err(|e| mismatch(e.to_string()))?;
        if rec.schema != dataset::SCHEMA_VERSION {
            return Err(mismatch(format!("schema {}", rec.schema)));
        }
        out.push(rec.trajectory);
    }
    Ok(out)
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, opts: RunOptions) -> Result<Self, PipelineError> {
        cfg.validate().map_err(|e| PipelineError::from((Stage::Config, e)))?;
        let res = Resources::load(&cfg)?;
        let jobs = opts
            .jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if jobs == 0 {
            return Err(PipelineError::config(Stage::Config, "--jobs must be at least 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| PipelineError::config(Stage::Config, e.to_string()))?;
        Ok(Self {
            cfg,
            res,
            opts,
            pool,
            gateway: None,
            stages: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        out_path(&self.cfg, rel)
    }

    fn gateway(&mut self, stage: Stage) -> Result<&Gateway, PipelineError> {
        if self.gateway.is_none() {
            let images: Arc<dyn ImageStore> = self.res.images.clone();
            let gw = Gateway::new(&self.cfg.gateway, &self.res.vocab, images)
                .map_err(|e| match e {
                    GatewayError::Config(m) => PipelineError::config(stage, m),
                    other => PipelineError::failed(stage, gateway_kind(&other), other),
                })?;
            self.gateway = Some(gw);
        }
        Ok(self.gateway.as_ref().expect("just set"))
    }

    fn clients(&self) -> Result<Clients, PipelineError> {
        let cfg_err = |e: &dyn fmt::Display| PipelineError::config(Stage::Sample, e.to_string());
        Ok(match &self.cfg.adapters {
            AdapterConfig::Stub { labels, actions } => (
                Arc::new(StubLabelClient::load(labels, &self.res.vocab.rooms).map_err(|e| cfg_err(&e))?),
                Arc::new(StubActionClient::load(actions).map_err(|e| cfg_err(&e))?),
            ),
            AdapterConfig::Http {
                label_url,
                action_url,
                timeout_s,
            } => {
                let t = Duration::from_secs_f64(*timeout_s);
                (
                    Arc::new(HttpLabelClient::new(label_url, t, self.res.vocab.rooms.clone())),
                    Arc::new(HttpActionClient::new(action_url, t)),
                )
            }
        })
    }

    fn require(&self, stage: Stage, needs: Stage, rel: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::config(
                stage,
                format!("missing output of stage `{needs}`: {} (run `{needs}` first)", p.display()),
            ))
        }
    }

    fn ensure_out(&self, stage: Stage, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::failed(stage, "IoError", format!("{}: {e}", dir.display())))
    }

    fn finish(&mut self, report: StageReport) -> StageReport {
        if let Some(stage) = report.stage {
            log::info!("{stage} done: {:?}", report.counts);
        }
        self.stages.push(report.clone());
        report
    }

    /// Labels frames, samples trajectories and grounds their actions.
    pub fn sample(&mut self) -> Result<StageReport, PipelineError> {
        let stage = Stage::Sample;
        let target = self.path(TRAJECTORIES_FILE);
        if self.opts.dry_run {
            let mut r = StageReport::new(stage);
            r.planned = self
                .res
                .videos
                .iter()
                .map(|v| {
                    format!(
                        "sample up to {} trajectories from {} ({} frames)",
                        self.cfg.sampler.trajectories_per_video,
                        v.video_id,
                        v.frames.len()
                    )
                })
                .chain([format!("write {}", target.display())])
                .collect();
            return Ok(self.finish(r));
        }
        let (labeler, actions) = self.clients()?;
        let images: &dyn ImageStore = self.res.images.as_ref();
        let cfg = &self.cfg;
        let per_video: Vec<Result<Vec<Trajectory>, PipelineError>> = self.pool.install(|| {
            self.res
                .videos
                .par_iter()
                .map(|video| {
                    let cached = CachedLabeler::new(labeler.clone());
                    let annotated =
                        annotate_frames(&video.frames, &cached, images, cfg.sampler.threshold, cfg.grounding.retry)
                            .map_err(|e| match e {
                                SamplerError::Grounding(g) => PipelineError::failed(stage, grounding_kind(&g), g),
                                other => PipelineError::failed(stage, "SamplerError", other),
                            })?;
                    let sampled = sample_many(&annotated, &cfg.sampler);
                    if sampled.is_empty() {
                        log::warn!("{}: no valid trajectory", video.video_id);
                    }
                    sampled
                        .iter()
                        .map(|t| {
                            let labeled = label_nodes(t, &cached, images, &cfg.grounding)
                                .map_err(|e| PipelineError::failed(stage, grounding_kind(&e), e))?;
                            ground_actions(&labeled, actions.as_ref(), images, cfg.grounding.retry)
                                .map_err(|e| PipelineError::failed(stage, grounding_kind(&e), e))
                        })
                        .collect()
                })
                .collect()
        });
        let mut trajs = Vec::new();
        for v in per_video {
            trajs.extend(v?);
        }
        self.ensure_out(stage, &cfg.paths.out)?;
        write_trajectories(&target, &trajs).map_err(|e| PipelineError::failed(stage, "IoError", e))?;
        let mut r = StageReport::new(stage)
            .count("videos", self.res.videos.len())
            .count("trajectories", trajs.len());
        r.outputs.push(target);
        Ok(self.finish(r))
    }

    /// Generates and verifies one instruction per trajectory and granularity.
    pub fn generate(&mut self) -> Result<StageReport, PipelineError> {
        let stage = Stage::Generate;
        let src = self.require(stage, Stage::Sample, TRAJECTORIES_FILE)?;
        let trajs = read_trajectories(&src).map_err(dataset_err(stage))?;
        let dir = self.path(DATASET_DIR);
        let grans = self.cfg.generation.granularities.clone();
        if self.opts.dry_run {
            let mut r = StageReport::new(stage);
            r.planned = vec![
                format!(
                    "generate {} instructions ({} trajectories × {} granularities), up to {} attempts each",
                    trajs.len() * grans.len(),
                    trajs.len(),
                    grans.len(),
                    self.cfg.verify.max_attempts
                ),
                format!("write {}", dir.display()),
            ];
            return Ok(self.finish(r));
        }
        self.gateway(stage)?;
        let jobs: Vec<(&Trajectory, Granularity)> = trajs.iter().flat_map(|t| grans.iter().map(move |&g| (t, g))).collect();
        let verifier = Verifier {
            gateway: self.gateway.as_ref().expect("gateway built"),
            templates: &self.res.templates,
            rules: &self.res.rules,
            vocab: &self.res.vocab,
            config: &self.cfg.verify,
        };
        let results: Vec<Result<PathInstructionPair, VerifyError>> = self
            .pool
            .install(|| jobs.par_iter().map(|(t, g)| verifier.generate_verified(t, *g)).collect());
        let mut pairs = Vec::with_capacity(results.len());
        for r in results {
            pairs.push(r.map_err(|e| PipelineError::failed(stage, verify_kind(&e), e))?);
        }
        self.write_pairs(stage, &dir, pairs)
    }

    fn write_pairs(&mut self, stage: Stage, dir: &Path, pairs: Vec<PathInstructionPair>) -> Result<StageReport, PipelineError> {
        let (emitted, quarantined): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|p| self.cfg.verify.emits(p.status()));
        let opts = WriteOptions {
            split: self.cfg.split.clone(),
            created_at_unix: self.cfg.created_at(),
        };
        let manifest = dataset::write_dataset(dir, &emitted, &quarantined, &opts).map_err(dataset_err(stage))?;
        let mut r = StageReport::new(stage)
            .count("pairs", manifest.pairs)
            .count("verified", manifest.by_status["verified"])
            .count("rejected", manifest.by_status["rejected"])
            .count("emitted", emitted.len())
            .count("quarantined", quarantined.len());
        r.outputs.push(dir.to_path_buf());
        Ok(self.finish(r))
    }

    /// Re-runs cleanup and verification on the generated dataset.
    pub fn verify(&mut self) -> Result<StageReport, PipelineError> {
        let stage = Stage::Verify;
        let src = self.require(stage, Stage::Generate, DATASET_DIR)?;
        let ds = dataset::read_dataset(&src).map_err(dataset_err(stage))?;
        let dir = self.path(REVERIFIED_DIR);
        if self.opts.dry_run {
            let mut r = StageReport::new(stage);
            r.planned = vec![
                format!("re-verify {} pairs", ds.pairs.len() + ds.quarantine.len()),
                format!("write {}", dir.display()),
            ];
            return Ok(self.finish(r));
        }
        self.gateway(stage)?;
        let verifier = Verifier {
            gateway: self.gateway.as_ref().expect("gateway built"),
            templates: &self.res.templates,
            rules: &self.res.rules,
            vocab: &self.res.vocab,
            config: &self.cfg.verify,
        };
        let all: Vec<&PathInstructionPair> = ds.pairs.iter().chain(&ds.quarantine).collect();
        let results: Vec<Result<PathInstructionPair, VerifyError>> =
            self.pool.install(|| all.par_iter().map(|p| verifier.reverify(p)).collect());
        let mut pairs = Vec::with_capacity(results.len());
        for r in results {
            pairs.push(r.map_err(|e| PipelineError::failed(stage, verify_kind(&e), e))?);
        }
        self.write_pairs(stage, &dir, pairs)
    }

    /// Builds pretext examples from the verified pairs of the dataset.
    pub fn pretext(&mut self) -> Result<StageReport, PipelineError> {
        let stage = Stage::Pretext;
        let src = self.require(stage, Stage::Generate, DATASET_DIR)?;
        let ds = dataset::read_dataset(&src).map_err(dataset_err(stage))?;
        let dir = self.path(PRETEXT_DIR);
        let pc = &self.cfg.pretext;
        if self.opts.dry_run {
            let verified = ds.pairs.iter().filter(|p| p.is_verified()).count();
            let mut r = StageReport::new(stage);
            r.planned = vec![
                format!(
                    "build mlm, mvm, pij (+/-) and pr examples for {verified} verified pairs \
                     ({} regions × {} dims per node, k = {})",
                    pc.regions, pc.dim, pc.pr_candidates
                ),
                format!("write {}", dir.display()),
            ];
            return Ok(self.finish(r));
        }
        let features = StubFeatures {
            regions: pc.regions,
            dim: pc.dim,
            seed: pc.seed,
        };
        let batch = self
            .pool
            .install(|| pretext::build_batch(&ds.pairs, &features, &WordTokenizer, pc))
            .map_err(|e| {
                let kind = match e {
                    pretext::PretextError::FeatureProviderUnavailable { .. } => "FeatureProviderUnavailable",
                    pretext::PretextError::Config(_) => return PipelineError::config(stage, e.to_string()),
                    _ => "PretextError",
                };
                PipelineError::failed(stage, kind, e)
            })?;
        for (pair, task, e) in &batch.skipped {
            log::warn!("{pair}: {task} skipped: {e}");
        }
        self.ensure_out(stage, &dir)?;
        let bin = dir.join(PRETEXT_FILE);
        pretext::write_pretext(&bin, &batch.examples).map_err(|e| PipelineError::failed(stage, "IoError", e))?;
        let manifest = PretextManifest::build(&batch.examples, &batch.skipped, pc, self.cfg.hash(), features.seed);
        let mpath = dir.join("manifest.json");
        dataset::write_json(&mpath, &manifest).map_err(dataset_err(stage))?;
        let mut r = StageReport::new(stage)
            .count("examples", manifest.examples)
            .count("skipped", batch.skipped.len());
        r.outputs.extend([bin, mpath]);
        Ok(self.finish(r))
    }

    /// Writes the R2R-style export of the verified pairs.
    pub fn export(&mut self) -> Result<StageReport, PipelineError> {
        let stage = Stage::Export;
        let src = self.require(stage, Stage::Generate, DATASET_DIR)?;
        let ds = dataset::read_dataset(&src).map_err(dataset_err(stage))?;
        let target = self.path(EXPORT_FILE);
        let verified: Vec<PathInstructionPair> = ds.pairs.into_iter().filter(|p| p.is_verified()).collect();
        if self.opts.dry_run {
            let mut r = StageReport::new(stage);
            r.planned = vec![format!("export {} verified pairs to {}", verified.len(), target.display())];
            return Ok(self.finish(r));
        }
        self.ensure_out(stage, target.parent().expect("export file has a parent"))?;
        let records = dataset::export_r2r_style(&verified, &target).map_err(dataset_err(stage))?;
        let mut r = StageReport::new(stage).count("records", records.len());
        r.outputs.push(target);
        Ok(self.finish(r))
    }

    /// Recomputed manifest of the generated dataset.
    pub fn stats(&mut self) -> Result<DatasetManifest, PipelineError> {
        let stage = Stage::Stats;
        let src = self.require(stage, Stage::Generate, DATASET_DIR)?;
        let ds = dataset::read_dataset(&src).map_err(dataset_err(stage))?;
        let all: Vec<PathInstructionPair> = ds.pairs.into_iter().chain(ds.quarantine).collect();
        let m = dataset::stats_with(&all, &ds.manifest.split, ds.manifest.created_at_unix);
        self.finish(StageReport::new(stage).count("pairs", m.pairs));
        Ok(m)
    }

    /// sample → generate → pretext → export.
    pub fn e2e(&mut self) -> Result<Vec<StageReport>, PipelineError> {
        if self.opts.dry_run {
            // later stages need earlier outputs; describe the chain instead
            let mut r = StageReport::new(Stage::Sample);
            r.planned = vec![
                format!(
                    "sample {} video(s) from {}",
                    self.res.videos.len(),
                    self.cfg.paths.videos.display()
                ),
                format!("generate {:?} per trajectory", self.cfg.generation.granularities),
                "build pretext examples".into(),
                "export verified pairs".into(),
                format!("write outputs under {}", self.cfg.paths.out.display()),
            ];
            return Ok(vec![self.finish(r)]);
        }
        Ok(vec![self.sample()?, self.generate()?, self.pretext()?, self.export()?])
    }

    pub fn gateway_stats(&self) -> Option<GatewayStats> {
        self.gateway.as_ref().map(Gateway::stats)
    }

    pub fn run_record(&self) -> RunRecord {
        let mut seeds = BTreeMap::from([
            ("sampler".to_string(), self.cfg.sampler.seed),
            ("pretext".to_string(), self.cfg.pretext.seed),
        ]);
        if let Some(s) = self.cfg.seed {
            seeds.insert("run".into(), s);
        }
        match self.cfg.gateway.backend {
            BackendConfig::MockFaithful { seed } | BackendConfig::MockLossy { seed, .. } => {
                seeds.insert("gateway".into(), seed);
            }
            _ => {}
        }
        RunRecord {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: self.stages.clone(),
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            seeds,
            template_version: self.res.templates.version().to_string(),
            cleanup_rules_version: self.res.rules.version().to_string(),
            room_lexicon_version: self.res.vocab.rooms.version().to_string(),
            action_lexicon_version: self.res.vocab.actions.version().to_string(),
            model_id: self.gateway.as_ref().map(|g| g.model_id().to_string()),
            gateway_calls: self.gateway_stats().map(|s| {
                BTreeMap::from([
                    ("generation".to_string(), s.generation_calls),
                    ("extraction".to_string(), s.extraction_calls),
                    ("sends".to_string(), s.backend_sends),
                    ("failures".to_string(), s.failures),
                ])
            }),
        }
    }

    /// Writes `run.json` unless this is a dry run.
    pub fn write_run_record(&self) -> Result<Option<PathBuf>, PipelineError> {
        if self.opts.dry_run {
            return Ok(None);
        }
        let stage = self.stages.last().and_then(|s| s.stage).unwrap_or(Stage::Config);
        self.ensure_out(stage, &self.cfg.paths.out)?;
        let path = self.path(RUN_RECORD_FILE);
        dataset::write_json(&path, &self.run_record()).map_err(dataset_err(stage))?;
        Ok(Some(path))
    }
}
