//! Adapters for the three external models: segmenter, captioner and chat
//! model. Each has an HTTP client ([`live`]) and a fixture-backed stand-in
//! ([`mock`]); the pipeline only sees the traits.

use std::env;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::Bbox;
use crate::mask::RawSegment;

pub mod live;
pub mod mock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExchangeMeta {
    pub latency: Duration,
    pub retries: u32,
}

/// One request/reply round with the chat model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatExchange {
    pub messages: Vec<ChatMessage>,
    pub reply: String,
    pub meta: ExchangeMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub text: String,
    pub confidence: Option<f64>,
}

impl CaptionResult {
    /// Collapses line breaks so the caption fits on one prompt line.
    /// Returns `None` for an empty caption.
    pub fn new(text: &str, confidence: Option<f64>) -> Option<Self> {
        let text = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        (!text.is_empty()).then(|| Self {
            text,
            confidence: confidence.map(|c| c.clamp(0.0, 1.0)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendHealth {
    Ok,
    Unconfigured,
    Down,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("{backend} unreachable after {retries} retries: {message}")]
    Transport {
        backend: &'static str,
        message: String,
        retries: u32,
    },
    #[error("{backend} returned an unexpected response: {message}")]
    Protocol {
        backend: &'static str,
        message: String,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{backend} is not configured")]
    Unconfigured { backend: &'static str },
    #[error("no recorded {backend} fixture for {key}")]
    MockMiss { backend: &'static str, key: String },
    #[error("captioner returned an empty caption")]
    EmptyCaption,
}

impl BackendError {
    /// True when the failure is the service's fault rather than the caller's.
    pub fn is_unavailable(&self) -> bool {
        !matches!(self, BackendError::Input(_))
    }
}

#[async_trait]
pub trait Segmenter: Send + Sync {
    /// Segments are numbered `1..=N` in returned order.
    async fn segment(&self, image: &[u8]) -> Result<Vec<RawSegment>, BackendError>;
    async fn health(&self) -> BackendHealth;
}

#[async_trait]
pub trait Captioner: Send + Sync {
    /// Captions the `region` crop, or the whole image when `region` is `None`.
    async fn caption(&self, image: &[u8], region: Option<Bbox>)
        -> Result<CaptionResult, BackendError>;
    async fn health(&self) -> BackendHealth;
}

#[async_trait]
pub trait ChatModel: Send + Sync {
    async fn complete(&self, messages: &[ChatMessage]) -> Result<ChatExchange, BackendError>;
    async fn health(&self) -> BackendHealth;
}

/// The three adapters a pipeline runs against.
#[derive(Clone)]
pub struct Backends {
    pub segmenter: Arc<dyn Segmenter>,
    pub captioner: Arc<dyn Captioner>,
    pub chat: Arc<dyn ChatModel>,
}

impl Backends {
    pub fn from_config(config: &BackendConfig) -> Result<Self, ConfigError> {
        match config.mode {
            BackendMode::Mock => {
                let dir = config
                    .fixture_dir
                    .as_ref()
                    .ok_or(ConfigError::MissingFixtures)?;
                let fixtures = Arc::new(mock::FixtureSet::load(dir)?);
                Ok(mock::backends(fixtures))
            }
            BackendMode::Live => live::backends(config),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Mock,
}

impl std::str::FromStr for BackendMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Ok(Self::Live),
            "mock" => Ok(Self::Mock),
            other => Err(ConfigError::Invalid(format!(
                "backend mode must be live or mock, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("mock mode requires a fixture directory")]
    MissingFixtures,
    #[error("fixture {path}: {message}")]
    Fixture { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub fixture_dir: Option<PathBuf>,
    pub chat_endpoint: Option<String>,
    pub chat_api_key: Option<String>,
    pub chat_model: String,
    pub caption_endpoint: Option<String>,
    pub caption_api_key: Option<String>,
    pub segmenter_endpoint: Option<String>,
    pub request_timeout: Duration,
    pub health_timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            fixture_dir: None,
            chat_endpoint: None,
            chat_api_key: None,
            chat_model: "gpt-4".to_string(),
            caption_endpoint: None,
            caption_api_key: None,
            segmenter_endpoint: None,
            request_timeout: Duration::from_secs(120),
            health_timeout: Duration::from_secs(2),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl BackendConfig {
    /// Reads `BACKEND_MODE`, `FIXTURE_DIR`, `CHAT_*`, `CAPTION_*` and
    /// `SEGMENTER_ENDPOINT`. Empty variables count as unset.
    pub fn from_env() -> Result<Self, ConfigError> {
        let var = |k: &str| env::var(k).ok().filter(|v| !v.trim().is_empty());
        let mut cfg = Self::default();
        if let Some(mode) = var("BACKEND_MODE") {
            cfg.mode = mode.parse()?;
        }
        cfg.fixture_dir = var("FIXTURE_DIR").map(PathBuf::from);
        cfg.chat_endpoint = var("CHAT_ENDPOINT");
        cfg.chat_api_key = var("CHAT_API_KEY");
        if let Some(model) = var("CHAT_MODEL") {
            cfg.chat_model = model;
        }
        cfg.caption_endpoint = var("CAPTION_ENDPOINT");
        cfg.caption_api_key = var("CAPTION_API_KEY");
        cfg.segmenter_endpoint = var("SEGMENTER_ENDPOINT");
        if let Some(n) = var("BACKEND_MAX_IN_FLIGHT") {
            cfg.max_in_flight = n
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("BACKEND_MAX_IN_FLIGHT: {n:?}")))?;
        }
        Ok(cfg)
    }
}

/// Retries transport failures with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash used to key recorded chat transcripts. Message content is
/// whitespace-normalized so cosmetic prompt edits keep their transcripts.
pub fn request_hash(messages: &[ChatMessage]) -> String {
    let normalized: Vec<(Role, String)> = messages
        .iter()
        .map(|m| {
            (
                m.role,
                m.content.split_whitespace().collect::<Vec<_>>().join(" "),
            )
        })
        .collect();
    let canonical = serde_json::to_vec(&normalized).expect("plain data serializes");
    sha256_hex(&canonical)
}
