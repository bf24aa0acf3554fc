//! Chat-with-images completion gateway.
//!
//! One [`Gateway`] fronts one backend (remote HTTP, the two offline mocks, or
//! a journal replay). It bounds in-flight requests, retries transient
//! failures, counts calls and optionally journals every exchange.

mod journal;
mod mock;
mod remote;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use journal::{read_journal, Journal, JournalError, JournalRecord};
pub use mock::{
    mock_extraction_answer, Corruption, MockBackend, NoiseKind, NOISE_CHARS, TEMPLATE_FRAGMENTS,
};
pub use remote::{encode_image, RemoteBackend};

use crate::frames::ImageStore;
use crate::lexicon::Vocabulary;
use crate::prompt::Prompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Remote {
        endpoint: String,
        model: String,
        /// Name of the environment variable holding the bearer credential.
        credential_env: String,
    },
    MockFaithful {
        seed: u64,
    },
    MockLossy {
        seed: u64,
        swap_prob: f64,
        noise_prob: f64,
    },
    Replay {
        journal: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: BackendConfig,
    pub max_inflight: usize,
    pub request_timeout_s: f64,
    pub retry_limit: u32,
    pub retry_base_delay_ms: u64,
    pub temperature: f64,
    pub max_image_side: u32,
    /// Append-only exchange log; disabled when unset.
    pub journal: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::MockFaithful { seed: 0 },
            max_inflight: 4,
            request_timeout_s: 60.0,
            retry_limit: 3,
            retry_base_delay_ms: 250,
            temperature: 0.2,
            max_image_side: 512,
            journal: None,
        }
    }
}

impl GatewayConfig {
    pub fn mock_faithful(seed: u64) -> Self {
        Self {
            backend: BackendConfig::MockFaithful { seed },
            ..Self::default()
        }
    }

    pub fn mock_lossy(seed: u64, swap_prob: f64, noise_prob: f64) -> Self {
        Self {
            backend: BackendConfig::MockLossy {
                seed,
                swap_prob,
                noise_prob,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if let BackendConfig::MockLossy {
            swap_prob, noise_prob, ..
        } = self.backend
        {
            for (name, p) in [("swap_prob", swap_prob), ("noise_prob", noise_prob)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(GatewayError::Config(format!("{name} = {p} outside [0, 1]")));
                }
            }
        }
        if self.max_inflight == 0 {
            return Err(GatewayError::Config("max_inflight must be at least 1".into()));
        }
        if self.retry_limit == 0 {
            return Err(GatewayError::Config("retry_limit must be at least 1".into()));
        }
        if self.request_timeout_s.is_nan() || self.request_timeout_s <= 0.0 {
            return Err(GatewayError::Config("request_timeout_s must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub model_id: String,
    pub usage: Usage,
    /// Backend sends it took, retries included.
    pub sends: u32,
    /// Corruptions a lossy mock applied; empty for every other backend.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corruptions: Vec<Corruption>,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("backend timed out on all {attempts} attempts: {detail}")]
    BackendTimeout { attempts: u32, detail: String },
    #[error("backend rejected the request (HTTP {status}) on attempt {attempts}: {detail}")]
    BackendRejected { attempts: u32, status: u16, detail: String },
    #[error("backend failed {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("no journaled response for request {0}")]
    ReplayMiss(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

impl GatewayError {
    pub fn attempts(&self) -> u32 {
        match self {
            GatewayError::BackendTimeout { attempts, .. }
            | GatewayError::BackendRejected { attempts, .. }
            | GatewayError::RetriesExhausted { attempts, .. } => *attempts,
            _ => 0,
        }
    }
}

/// One failed send as a backend reports it.
#[derive(Debug, Clone, PartialEq)]
pub enum SendError {
    Timeout(String),
    /// Permanent refusal; never retried.
    Rejected { status: u16, detail: String },
    Transient(String),
    ReplayMiss(String),
}

/// A completion backend. `attempt` is the caller's regeneration attempt
/// (1-based); mocks mix it into their RNG stream so regenerations differ.
pub trait CompletionBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn send(&self, prompt: &Prompt, attempt: u32) -> Result<Completion, SendError>;
}

/// Counting semaphore that also records its high-water mark.
#[derive(Debug)]
pub struct InflightLimiter {
    max: usize,
    state: Mutex<(usize, usize)>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            state: Mutex::new((0, 0)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap();
        while st.0 >= self.max {
            st = self.freed.wait(st).unwrap();
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        Permit { limiter: self }
    }

    pub fn current(&self) -> usize {
        self.state.lock().unwrap().0
    }

    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().1
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.limiter.state.lock().unwrap();
        st.0 -= 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub generation_calls: u64,
    pub extraction_calls: u64,
    pub backend_sends: u64,
    pub failures: u64,
    pub peak_inflight: usize,
}

impl GatewayStats {
    pub fn calls(&self) -> u64 {
        self.generation_calls + self.extraction_calls
    }
}

pub struct Gateway {
    backend: Box<dyn CompletionBackend>,
    limiter: InflightLimiter,
    journal: Option<Journal>,
    retry_limit: u32,
    retry_base_delay: Duration,
    generation_calls: AtomicU64,
    extraction_calls: AtomicU64,
    backend_sends: AtomicU64,
    failures: AtomicU64,
}

impl Gateway {
    pub fn new(cfg: &GatewayConfig, vocab: &Vocabulary, images: Arc<dyn ImageStore>) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let backend: Box<dyn CompletionBackend> = match &cfg.backend {
            BackendConfig::MockFaithful { seed } => Box::new(MockBackend::faithful(*seed, vocab.clone())),
            BackendConfig::MockLossy {
                seed,
                swap_prob,
                noise_prob,
            } => Box::new(MockBackend::lossy(*seed, *swap_prob, *noise_prob, vocab.clone())),
            BackendConfig::Remote {
                endpoint,
                model,
                credential_env,
            } => {
                let credential = std::env::var(credential_env).map_err(|_| {
                    GatewayError::Config(format!("credential variable {credential_env} is not set"))
                })?;
                Box::new(RemoteBackend::new(
                    endpoint,
                    model,
                    credential,
                    Duration::from_secs_f64(cfg.request_timeout_s),
                    cfg.temperature,
                    cfg.max_image_side,
                    images,
                ))
            }
            BackendConfig::Replay { journal } => Box::new(journal::ReplayBackend::load(journal)?),
        };
        let journal = match &cfg.journal {
            Some(path) => Some(Journal::open(path)?),
            None => None,
        };
        Ok(Self::with_backend(backend, cfg, journal))
    }

    pub fn with_backend(backend: Box<dyn CompletionBackend>, cfg: &GatewayConfig, journal: Option<Journal>) -> Self {
        Self {
            backend,
            limiter: InflightLimiter::new(cfg.max_inflight),
            journal,
            retry_limit: cfg.retry_limit.max(1),
            retry_base_delay: Duration::from_millis(cfg.retry_base_delay_ms),
            generation_calls: AtomicU64::new(0),
            extraction_calls: AtomicU64::new(0),
            backend_sends: AtomicU64::new(0),
            failures: AtomicU64::new(0),
        }
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    /// Sends `prompt`, retrying timeouts and transient failures up to the
    /// retry limit. Permanent rejections fail immediately.
    pub fn complete(&self, prompt: &Prompt, attempt: u32) -> Result<Completion, GatewayError> {
        if prompt.is_extraction() {
            self.extraction_calls.fetch_add(1, Ordering::Relaxed);
        } else {
            self.generation_calls.fetch_add(1, Ordering::Relaxed);
        }
        let mut timeouts = 0;
        let mut last = String::new();
        for n in 1..=self.retry_limit {
            let result = {
                let _permit = self.limiter.acquire();
                self.backend_sends.fetch_add(1, Ordering::Relaxed);
                self.backend.send(prompt, attempt)
            };
            match result {
                Ok(mut completion) => {
                    completion.sends = n;
                    if let Some(journal) = &self.journal {
                        journal.append(&JournalRecord::new(prompt, attempt, &completion))?;
                    }
                    return Ok(completion);
                }
                Err(SendError::Rejected { status, detail }) => {
                    self.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(GatewayError::BackendRejected {
                        attempts: n,
                        status,
                        detail,
                    });
                }
                Err(SendError::ReplayMiss(key)) => {
                    self.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(GatewayError::ReplayMiss(key));
                }
                Err(SendError::Timeout(detail)) => {
                    timeouts += 1;
                    last = detail;
                }
                Err(SendError::Transient(detail)) => last = detail,
            }
            if n < self.retry_limit && !self.retry_base_delay.is_zero() {
                std::thread::sleep(self.retry_base_delay * (1 << (n - 1).min(8)));
            }
        }
        self.failures.fetch_add(1, Ordering::Relaxed);
        if timeouts == self.retry_limit {
            Err(GatewayError::BackendTimeout {
                attempts: self.retry_limit,
                detail: last,
            })
        } else {
            Err(GatewayError::RetriesExhausted {
                attempts: self.retry_limit,
                last,
            })
        }
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            generation_calls: self.generation_calls.load(Ordering::Relaxed),
            extraction_calls: self.extraction_calls.load(Ordering::Relaxed),
            backend_sends: self.backend_sends.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
            peak_inflight: self.limiter.peak(),
        }
    }

    pub fn inflight(&self) -> usize {
        self.limiter.current()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    struct Flaky {
        fail_first: u32,
        error: SendError,
        seen: AtomicU32,
    }

    impl CompletionBackend for Flaky {
        fn model_id(&self) -> &str {
            "flaky"
        }

        fn send(&self, _prompt: &Prompt, _attempt: u32) -> Result<Completion, SendError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst) + 1;
            if n <= self.fail_first {
                return Err(self.error.clone());
            }
            Ok(Completion {
                text: "ok.".into(),
                model_id: "flaky".into(),
                usage: Usage::default(),
                sends: 0,
                corruptions: Vec::new(),
            })
        }
    }

    fn prompt() -> Prompt {
        Prompt {
            system_text: "s".into(),
            user_text: "u".into(),
            images: vec![],
            template_id: "generation.coarse".into(),
            template_version: "t".into(),
        }
    }

    fn gateway(fail_first: u32, error: SendError) -> Gateway {
        let cfg = GatewayConfig {
            retry_base_delay_ms: 0,
            ..GatewayConfig::default()
        };
        Gateway::with_backend(
            Box::new(Flaky {
                fail_first,
                error,
                seen: AtomicU32::new(0),
            }),
            &cfg,
            None,
        )
    }

    #[test]
    fn transient_failures_are_retried() {
        let g = gateway(2, SendError::Transient("503".into()));
        let c = g.complete(&prompt(), 1).unwrap();
        assert_eq!(c.sends, 3);
        assert_eq!(g.stats().backend_sends, 3);
        assert_eq!(g.stats().generation_calls, 1);
    }

    #[test]
    fn error_kinds_carry_attempts() {
        let g = gateway(10, SendError::Timeout("slow".into()));
        let e = g.complete(&prompt(), 1).unwrap_err();
        assert!(matches!(e, GatewayError::BackendTimeout { attempts: 3, .. }));

        let g = gateway(10, SendError::Transient("502".into()));
        let e = g.complete(&prompt(), 1).unwrap_err();
        assert!(matches!(e, GatewayError::RetriesExhausted { attempts: 3, .. }));

        let g = gateway(10, SendError::Rejected { status: 401, detail: "no".into() });
        let e = g.complete(&prompt(), 1).unwrap_err();
        assert!(matches!(e, GatewayError::BackendRejected { attempts: 1, status: 401, .. }));
        assert_eq!(g.stats().backend_sends, 1);
    }

    #[test]
    fn lossy_probabilities_are_validated() {
        assert!(GatewayConfig::mock_lossy(0, 1.5, 0.0).validate().is_err());
        assert!(GatewayConfig::mock_lossy(0, 0.5, -0.1).validate().is_err());
        assert!(GatewayConfig::mock_lossy(0, 1.0, 0.0).validate().is_ok());
    }

    #[test]
    fn limiter_tracks_peak() {
        let l = InflightLimiter::new(2);
        {
            let _a = l.acquire();
            let _b = l.acquire();
            assert_eq!(l.current(), 2);
        }
        assert_eq!(l.current(), 0);
        assert_eq!(l.peak(), 2);
    }
}
