//! Pipeline configuration file (TOML).
//!
//! Relative paths resolve against the directory holding the config file.
//! A top-level `seed` is copied into the sampler, the mock backends and the
//! pretext builder; `--seed` on the command line overrides it the same way.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Split;
use crate::gateway::{BackendConfig, GatewayConfig};
use crate::grounding::GroundingOptions;
use crate::model::Granularity;
use crate::pretext::PretextConfig;
use crate::sampler::SamplerConfig;
use crate::verify::VerifyConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("{message}")]
pub struct ConfigError {
    pub message: String,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        Self { message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// A video directory (with `index.txt`) or a directory of them.
    pub videos: PathBuf,
    pub out: PathBuf,
    pub templates: Option<PathBuf>,
    pub cleanup_rules: Option<PathBuf>,
    pub rooms_lexicon: Option<PathBuf>,
    pub actions_lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterConfig {
    /// Table-driven stand-ins; see `grounding::StubLabelClient`.
    Stub { labels: PathBuf, actions: PathBuf },
    Http {
        label_url: String,
        action_url: String,
        #[serde(default = "default_adapter_timeout")]
        timeout_s: f64,
    },
}

fn default_adapter_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Every trajectory gets one instruction per listed granularity.
    pub granularities: Vec<Granularity>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            granularities: Granularity::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    /// Manifest timestamp. Falls back to `SOURCE_DATE_EPOCH`, then 0.
    pub created_at_unix: Option<u64>,
    pub paths: Paths,
    pub adapters: AdapterConfig,
    #[serde(default)]
    pub grounding: GroundingOptions,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub pretext: PretextConfig,
    #[serde(default)]
    pub split: Split,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| ConfigError::new(format!("{}: {}", path.display(), e.message)))
    }

    /// Parses, resolves relative paths against `base`, applies the seed and
    /// validates.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::new(e.to_string()))?;
        let p = &mut cfg.paths;
        resolve(base, &mut p.videos);
        resolve(base, &mut p.out);
        for x in [&mut p.templates, &mut p.cleanup_rules, &mut p.rooms_lexicon, &mut p.actions_lexicon]
            .into_iter()
            .flatten()
        {
            resolve(base, x);
        }
        if let AdapterConfig::Stub { labels, actions } = &mut cfg.adapters {
            resolve(base, labels);
            resolve(base, actions);
        }
        if let BackendConfig::Replay { journal } = &mut cfg.gateway.backend {
            resolve(base, journal);
        }
        if let Some(j) = &mut cfg.gateway.journal {
            resolve(base, j);
        }
        if let Some(seed) = cfg.seed {
            cfg.apply_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.sampler.seed = seed;
        self.pretext.seed = seed;
        match &mut self.gateway.backend {
            BackendConfig::MockFaithful { seed: s } | BackendConfig::MockLossy { seed: s, .. } => *s = seed,
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.paths;
        let mut must_exist: Vec<(&str, &Path)> = vec![("paths.videos", &p.videos)];
        for (name, opt) in [
            ("paths.templates", &p.templates),
            ("paths.cleanup_rules", &p.cleanup_rules),
            ("paths.rooms_lexicon", &p.rooms_lexicon),
            ("paths.actions_lexicon", &p.actions_lexicon),
        ] {
            if let Some(x) = opt {
                must_exist.push((name, x));
            }
        }
        if let AdapterConfig::Stub { labels, actions } = &self.adapters {
            must_exist.push(("adapters.labels", labels));
            must_exist.push(("adapters.actions", actions));
        }
        if let BackendConfig::Replay { journal } = &self.gateway.backend {
            must_exist.push(("gateway.backend.journal", journal));
        }
        for (name, path) in must_exist {
            if !path.exists() {
                return Err(ConfigError::new(format!("{name}: {} does not exist", path.display())));
            }
        }
        self.sampler.validate().map_err(|e| ConfigError::new(format!("sampler: {e}")))?;
        self.gateway.validate().map_err(|e| ConfigError::new(format!("gateway: {e}")))?;
        self.verify.validate().map_err(|e| ConfigError::new(format!("verify: {e}")))?;
        self.pretext.validate().map_err(|e| ConfigError::new(format!("pretext: {e}")))?;
        if self.generation.granularities.is_empty() {
            return Err(ConfigError::new("generation.granularities is empty"));
        }
        if self.grounding.max_inflight == 0 {
            return Err(ConfigError::new("grounding.max_inflight must be at least 1"));
        }
        if let Some(v) = self.split.train.iter().find(|v| self.split.val.contains(v)) {
            return Err(ConfigError::new(format!("split: video {v} is in both train and val")));
        }
        Ok(())
    }

    /// sha256 over the canonical JSON form of the resolved config, leaving
    /// out the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn created_at(&self) -> u64 {
        self.created_at_unix
            .or_else(|| std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok())
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("videos")).unwrap();
        std::fs::write(dir.path().join("labels.tsv"), "").unwrap();
        std::fs::write(dir.path().join("actions.tsv"), "").unwrap();
        dir
    }

    const MINIMAL: &str = r#"
seed = 11
[paths]
videos = "videos"
out = "out"
[adapters]
kind = "stub"
labels = "labels.tsv"
actions = "actions.tsv"
"#;

    #[test]
    fn minimal_config_resolves_and_seeds() {
        let dir = base();
        let cfg = PipelineConfig::parse(MINIMAL, dir.path()).unwrap();
        assert_eq!(cfg.paths.out, dir.path().join("out"));
        assert_eq!(cfg.sampler.seed, 11);
        assert_eq!(cfg.pretext.seed, 11);
        assert_eq!(cfg.gateway.backend, BackendConfig::MockFaithful { seed: 11 });
        assert_eq!(cfg.generation.granularities.len(), 3);
    }

    #[test]
    fn missing_path_is_named() {
        let dir = base();
        std::fs::remove_file(dir.path().join("labels.tsv")).unwrap();
        let err = PipelineConfig::parse(MINIMAL, dir.path()).unwrap_err();
        assert!(err.message.starts_with("adapters.labels"), "{}", err.message);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        let dir = base();
        assert!(PipelineConfig::parse(&format!("{MINIMAL}\n[verify]\nmax_attempts = 0\n"), dir.path()).is_err());
        assert!(PipelineConfig::parse(&format!("bogus = 1\n{MINIMAL}"), dir.path()).is_err());
        let lossy = format!("{MINIMAL}\n[gateway.backend]\nkind = \"mock_lossy\"\nseed = 1\nswap_prob = 2.0\nnoise_prob = 0.0\n");
        assert!(PipelineConfig::parse(&lossy, dir.path()).is_err());
    }

    #[test]
    fn hash_tracks_seed() {
        let dir = base();
        let a = PipelineConfig::parse(MINIMAL, dir.path()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.apply_seed(12);
        assert_ne!(a.hash(), b.hash());
    }
}
