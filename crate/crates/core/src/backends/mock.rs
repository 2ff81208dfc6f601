//! Fixture-backed backends.
//!
//! A fixture directory holds one subdirectory per case:
//!
//! ```text
//! <case>/image.png         input image
//! <case>/segments.png      segment label map (0 = no segment)
//! <case>/captions.json     {"full": "...", "x1,y1,x2,y2": "..."}
//! <case>/transcripts.json  [{"request_hash", "messages", "reply"}]
//! ```
//!
//! Images are looked up by content digest and chat requests by
//! [`request_hash`], so lookups do not depend on file names.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    request_hash, sha256_hex, BackendError, BackendHealth, Backends, CaptionResult, Captioner,
    ChatExchange, ChatMessage, ChatModel, ConfigError, ExchangeMeta, Segmenter,
};
use crate::codec::decode_label_png;
use crate::geometry::{Bbox, LabelMap, Mask};
use crate::mask::RawSegment;

/// Caption key for the whole image.
pub const FULL_IMAGE_KEY: &str = "full";

/// Recorded chat round, in the format both the mock reads and the CLI writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub request_hash: String,
    pub messages: Vec<ChatMessage>,
    pub reply: String,
}

impl Transcript {
    pub fn new(messages: Vec<ChatMessage>, reply: String) -> Self {
        Self {
            request_hash: request_hash(&messages),
            messages,
            reply,
        }
    }
}

pub fn region_key(region: Option<Bbox>) -> String {
    match region {
        None => FULL_IMAGE_KEY.to_string(),
        Some(b) => format!("{},{},{},{}", b.x1, b.y1, b.x2, b.y2),
    }
}

#[derive(Debug, Clone)]
pub struct FixtureCase {
    pub name: String,
    pub segments: LabelMap,
    pub captions: BTreeMap<String, String>,
}

/// Immutable tables loaded from a fixture directory.
#[derive(Debug, Default)]
pub struct FixtureSet {
    cases: HashMap<String, FixtureCase>,
    transcripts: HashMap<String, Transcript>,
}

fn fixture_err(path: &Path, message: impl ToString) -> ConfigError {
    ConfigError::Fixture {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<T, ConfigError> {
    if !path.exists() {
        return Ok(T::default());
    }
    let text = fs::read_to_string(path).map_err(|e| fixture_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| fixture_err(path, e))
}

impl FixtureSet {
    pub fn load(dir: &Path) -> Result<Self, ConfigError> {
        let entries = fs::read_dir(dir).map_err(|e| fixture_err(dir, e))?;
        let mut case_dirs: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.join("image.png").is_file())
            .collect();
        case_dirs.sort();

        let mut set = FixtureSet::default();
        for case_dir in case_dirs {
            set.load_case(&case_dir)?;
        }
        Ok(set)
    }

    fn load_case(&mut self, dir: &Path) -> Result<(), ConfigError> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image_path = dir.join("image.png");
        let image = fs::read(&image_path).map_err(|e| fixture_err(&image_path, e))?;
        let (w, h) = image::load_from_memory(&image)
            .map(|img| (img.width() as usize, img.height() as usize))
            .map_err(|e| fixture_err(&image_path, e))?;

        let seg_path = dir.join("segments.png");
        let segments = if seg_path.exists() {
            let bytes = fs::read(&seg_path).map_err(|e| fixture_err(&seg_path, e))?;
            decode_label_png(&bytes).map_err(|e| fixture_err(&seg_path, e))?
        } else {
            LabelMap::filled(w, h, 0)
        };
        if segments.width() != w || segments.height() != h {
            return Err(fixture_err(&seg_path, "label map size differs from image"));
        }

        let captions: BTreeMap<String, String> = read_json(&dir.join("captions.json"))?;

        let transcripts_path = dir.join("transcripts.json");
        let transcripts: Vec<Transcript> = read_json(&transcripts_path)?;
        for t in transcripts {
            let actual = request_hash(&t.messages);
            if actual != t.request_hash {
                return Err(fixture_err(
                    &transcripts_path,
                    format!(
                        "request_hash {} does not match its messages ({actual}); the prompt changed, re-record this transcript",
                        t.request_hash
                    ),
                ));
            }
            if let Some(prev) = self.transcripts.get(&actual) {
                if prev.reply != t.reply {
                    return Err(fixture_err(
                        &transcripts_path,
                        format!("conflicting replies for request {actual}"),
                    ));
                }
            }
            self.transcripts.insert(actual, t);
        }

        self.cases.insert(
            sha256_hex(&image),
            FixtureCase {
                name,
                segments,
                captions,
            },
        );
        Ok(())
    }

    pub fn case_for(&self, image: &[u8]) -> Option<&FixtureCase> {
        self.cases.get(&sha256_hex(image))
    }

    pub fn case_count(&self) -> usize {
        self.cases.len()
    }

    pub fn transcript(&self, messages: &[ChatMessage]) -> Option<&Transcript> {
        self.transcripts.get(&request_hash(messages))
    }

    fn unknown_image(&self, backend: &'static str, image: &[u8]) -> BackendError {
        match image::load_from_memory(image) {
            Err(e) => BackendError::Input(format!("undecodable image: {e}")),
            Ok(_) => BackendError::MockMiss {
                backend,
                key: format!("image {}", sha256_hex(image)),
            },
        }
    }
}

/// Splits a label map into one raw segment per distinct nonzero label,
/// numbered 1..N in ascending label order.
pub fn segments_from_label_map(labels: &LabelMap) -> Vec<RawSegment> {
    let values: BTreeSet<u32> = labels.as_slice().iter().copied().filter(|&v| v != 0).collect();
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let mask: Mask = labels.map(|&l| l == v);
            RawSegment::new(i as u32 + 1, mask).expect("label present in map")
        })
        .collect()
}

pub struct MockSegmenter(pub Arc<FixtureSet>);
pub struct MockCaptioner(pub Arc<FixtureSet>);
pub struct MockChat(pub Arc<FixtureSet>);

pub fn backends(fixtures: Arc<FixtureSet>) -> Backends {
    Backends {
        segmenter: Arc::new(MockSegmenter(fixtures.clone())),
        captioner: Arc::new(MockCaptioner(fixtures.clone())),
        chat: Arc::new(MockChat(fixtures)),
    }
}

#[async_trait]
impl Segmenter for MockSegmenter {
    async fn segment(&self, image: &[u8]) -> Result<Vec<RawSegment>, BackendError> {
        match self.0.case_for(image) {
            Some(case) => Ok(segments_from_label_map(&case.segments)),
            None => Err(self.0.unknown_image("segmenter", image)),
        }
    }

    async fn health(&self) -> BackendHealth {
        BackendHealth::Ok
    }
}

#[async_trait]
impl Captioner for MockCaptioner {
    async fn caption(
        &self,
        image: &[u8],
        region: Option<Bbox>,
    ) -> Result<CaptionResult, BackendError> {
        let case = self
            .0
            .case_for(image)
            .ok_or_else(|| self.0.unknown_image("captioner", image))?;
        let key = region_key(region);
        let text = case.captions.get(&key).ok_or_else(|| BackendError::MockMiss {
            backend: "captioner",
            key: format!("{}:{key}", case.name),
        })?;
        CaptionResult::new(text, None).ok_or(BackendError::EmptyCaption)
    }

    async fn health(&self) -> BackendHealth {
        BackendHealth::Ok
    }
}

#[async_trait]
impl ChatModel for MockChat {
    async fn complete(&self, messages: &[ChatMessage]) -> Result<ChatExchange, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::Input("empty message list".into()));
        }
        let t = self
            .0
            .transcript(messages)
            .ok_or_else(|| BackendError::MockMiss {
                backend: "chat",
                key: format!("request {}", request_hash(messages)),
            })?;
        Ok(ChatExchange {
            messages: messages.to_vec(),
            reply: t.reply.clone(),
            meta: ExchangeMeta::default(),
        })
    }

    async fn health(&self) -> BackendHealth {
        BackendHealth::Ok
    }
}
