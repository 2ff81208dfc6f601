//! Session flow: detect objects once per image, then answer questions by
//! running the retrieval round and, when needed, the key-field round.

use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{sha256_hex, BackendError, Backends, ChatExchange};
use crate::geometry::{Bbox, Mask};
use crate::mask::{
    compose_objects, downscale_object, filter_masks, region_to_mask, resolve_overlaps,
    serialize_matrix, upscale_selection, MaskError, SemanticObject, CONTAINMENT_THRESHOLD,
    MATRIX_LONG_SIDE, MIN_AREA_FRACTION,
};
use crate::prompt::{
    ask, build_stage1_prompt, build_stage2_prompt, parse_stage1, parse_stage2, Stage1Reply,
    Stage2Reply, StageError, YesNo,
};
use crate::render::render_overlay;

pub const NO_OBJECTS_ANSWER: &str =
    "No objects were detected in the image, so the question cannot be answered.";
const CHAT_DOWN_ANSWER: &str = "The chat model is unavailable, so the question could not be answered.";
const UNPARSEABLE_ANSWER: &str =
    "The chat model's reply could not be understood, so no region can be highlighted.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decode,
    Segment,
    Caption,
    Stage1,
    Stage2,
    Localize,
    Render,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Decode => "decode",
            Stage::Segment => "segment",
            Stage::Caption => "caption",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Localize => "localize",
            Stage::Render => "render",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("malformed segmenter output: {0}")]
    Segmentation(#[from] MaskError),
    #[error("question is empty")]
    EmptyQuestion,
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Backend { stage, .. } => Some(*stage),
            PipelineError::InvalidImage(_) => Some(Stage::Decode),
            PipelineError::Segmentation(_) => Some(Stage::Segment),
            PipelineError::EmptyQuestion => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub min_area_fraction: f64,
    pub containment_threshold: f64,
    pub matrix_long_side: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_area_fraction: MIN_AREA_FRACTION,
            containment_threshold: CONTAINMENT_THRESHOLD,
            matrix_long_side: MATRIX_LONG_SIDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub digest: String,
    pub width: usize,
    pub height: usize,
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub image: ImageInfo,
    pub scene_caption: String,
    pub objects: Vec<SemanticObject>,
    pub history: Vec<QueryRecord>,
}

impl Session {
    pub fn object(&self, object_id: usize) -> Option<&SemanticObject> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session serializes")
    }

    pub fn from_json(text: &str, image: Vec<u8>) -> serde_json::Result<Self> {
        let mut session: Session = serde_json::from_str(text)?;
        session.image.bytes = image;
        Ok(session)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    /// A pixel highlight was produced.
    Highlighted,
    /// Textual answer, possibly with a fallback box.
    Answered,
    /// The model found no object to act on.
    Refused,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    BackendUnavailable,
    ParseFailure,
    InvalidSelection,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub kind: FailureKind,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightResult {
    pub answer_text: String,
    pub target_object: Option<usize>,
    pub segments: Vec<u32>,
    #[serde(with = "crate::codec::opt_mask_png")]
    pub highlight_mask: Option<Mask>,
    pub fallback_box: Option<Bbox>,
    #[serde(skip)]
    pub annotated_image: Vec<u8>,
}

impl HighlightResult {
    pub fn has_highlight(&self) -> bool {
        self.highlight_mask.is_some() || self.fallback_box.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageTimings {
    pub stage1: Duration,
    pub stage2: Duration,
    pub render: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: usize,
    pub question: String,
    pub status: QueryStatus,
    pub stage1: Option<Stage1Reply>,
    pub stage2: Option<Stage2Reply>,
    pub result: HighlightResult,
    pub failure: Option<QueryFailure>,
    /// Wall-clock only; left out of the persisted form so sessions stay
    /// byte-reproducible.
    #[serde(skip)]
    pub timing: StageTimings,
    #[serde(skip)]
    pub exchanges: Vec<ChatExchange>,
}

impl QueryRecord {
    fn new(query_id: usize, question: &str) -> Self {
        Self {
            query_id,
            question: question.to_string(),
            status: QueryStatus::Answered,
            stage1: None,
            stage2: None,
            result: HighlightResult {
                answer_text: String::new(),
                target_object: None,
                segments: Vec::new(),
                highlight_mask: None,
                fallback_box: None,
                annotated_image: Vec::new(),
            },
            failure: None,
            timing: StageTimings::default(),
            exchanges: Vec::new(),
        }
    }

    fn fail(&mut self, kind: FailureKind, stage: Stage, message: String, answer: &str) {
        tracing::warn!(%stage, ?kind, %message, "query degraded");
        self.status = QueryStatus::Failed;
        self.failure = Some(QueryFailure {
            kind,
            stage,
            message,
        });
        self.result.answer_text = answer.to_string();
        self.result.highlight_mask = None;
        self.result.fallback_box = None;
        self.result.segments.clear();
    }

    fn fail_stage(&mut self, stage: Stage, err: StageError) {
        let (kind, answer) = match &err {
            StageError::Backend(_) => (FailureKind::BackendUnavailable, CHAT_DOWN_ANSWER),
            StageError::Unparseable { .. } => (FailureKind::ParseFailure, UNPARSEABLE_ANSWER),
        };
        if let StageError::Unparseable { last_reply, .. } = &err {
            tracing::debug!(%stage, reply = %last_reply, "last unparseable reply");
        }
        self.fail(kind, stage, err.to_string(), answer);
    }
}

fn non_empty(text: &str, fallback: &str) -> String {
    if text.trim().is_empty() {
        fallback.to_string()
    } else {
        text.to_string()
    }
}

pub struct Pipeline {
    backends: Backends,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(backends: Backends, config: PipelineConfig) -> Self {
        Self { backends, config }
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    /// Segments, composes and captions every object in `image`.
    pub async fn detect_objects(&self, image: Vec<u8>) -> Result<Session, PipelineError> {
        let decoded = image::load_from_memory(&image)
            .map_err(|e| PipelineError::InvalidImage(e.to_string()))?;
        let (width, height) = (decoded.width() as usize, decoded.height() as usize);
        drop(decoded);

        let backend = |stage| {
            move |source: BackendError| match source {
                BackendError::Input(msg) => PipelineError::InvalidImage(msg),
                source => PipelineError::Backend { stage, source },
            }
        };

        let raw = self
            .backends
            .segmenter
            .segment(&image)
            .await
            .map_err(backend(Stage::Segment))?;
        let total = raw.len();
        let kept = filter_masks(raw, (width * height) as u64, self.config.min_area_fraction);
        let labels = resolve_overlaps(width, height, &kept)?;
        let mut objects = compose_objects(&labels, &kept, self.config.containment_threshold)?;
        tracing::info!(segments = total, kept = kept.len(), objects = objects.len(), "objects composed");

        let scene = self
            .backends
            .captioner
            .caption(&image, None)
            .await
            .map_err(backend(Stage::Caption))?;
        for object in &mut objects {
            object.descriptor = self
                .backends
                .captioner
                .caption(&image, Some(object.bbox))
                .await
                .map_err(backend(Stage::Caption))?
                .text;
        }

        let digest = sha256_hex(&image);
        Ok(Session {
            session_id: digest[..32].to_string(),
            image: ImageInfo {
                digest,
                width,
                height,
                bytes: image,
            },
            scene_caption: scene.text,
            objects,
            history: Vec::new(),
        })
    }

    /// Answers `question` against `session` and appends the record to its
    /// history. Model and parsing failures degrade into a record without a
    /// highlight; only an empty question is an error.
    pub async fn answer_query<'s>(
        &self,
        session: &'s mut Session,
        question: &str,
    ) -> Result<&'s QueryRecord, PipelineError> {
        let question = question.trim();
        if question.is_empty() {
            return Err(PipelineError::EmptyQuestion);
        }
        let mut record = QueryRecord::new(session.history.len(), question);
        if session.objects.is_empty() {
            record.status = QueryStatus::Refused;
            record.result.answer_text = NO_OBJECTS_ANSWER.to_string();
        } else {
            self.run_stages(session, question, &mut record).await;
        }

        let started = Instant::now();
        match render_overlay(
            &session.image.bytes,
            record.result.highlight_mask.as_ref(),
            record.result.fallback_box,
        ) {
            Ok(png) => record.result.annotated_image = png,
            Err(e) => {
                let answer = record.result.answer_text.clone();
                record.fail(FailureKind::Internal, Stage::Render, e.to_string(), &answer);
            }
        }
        record.timing.render = started.elapsed();

        session.history.push(record);
        Ok(session.history.last().expect("just pushed"))
    }

    async fn run_stages(&self, session: &Session, question: &str, record: &mut QueryRecord) {
        let chat = self.backends.chat.as_ref();
        let started = Instant::now();
        let messages = build_stage1_prompt(&session.scene_caption, &session.objects, question)
            .expect("objects and question checked by caller");
        let outcome = ask(chat, messages, parse_stage1).await;
        record.timing.stage1 = started.elapsed();
        let stage1 = match outcome {
            Ok(out) => {
                record.exchanges.extend(out.exchanges);
                out.parsed
            }
            Err(err) => return record.fail_stage(Stage::Stage1, err),
        };
        record.stage1 = Some(stage1.clone());

        let target = stage1.objects.first();
        if stage1.objects.len() > 1 {
            tracing::info!(
                skipped = ?stage1.objects[1..].iter().map(|o| o.object_id).collect::<Vec<_>>(),
                "only the first targeted object is localized"
            );
        }
        let answer = non_empty(&stage1.reply, UNPARSEABLE_ANSWER);
        match (stage1.answer, target) {
            (YesNo::Yes, _) => {
                record.status = QueryStatus::Answered;
                record.result.answer_text = answer;
                // box only for an object we actually detected
                if let Some(obj) = target.and_then(|t| session.object(t.object_id)) {
                    record.result.target_object = Some(obj.object_id);
                    record.result.fallback_box = Some(obj.bbox);
                }
            }
            (YesNo::No, None) => {
                record.status = QueryStatus::Refused;
                record.result.answer_text = answer;
            }
            (YesNo::No, Some(target)) => {
                let Some(object) = session.object(target.object_id) else {
                    return record.fail(
                        FailureKind::InvalidSelection,
                        Stage::Stage1,
                        format!("object id {} is not in the object list", target.object_id),
                        &answer,
                    );
                };
                record.result.target_object = Some(object.object_id);
                self.localize(object, &target.follow_up, record).await;
            }
        }
    }

    async fn localize(&self, object: &SemanticObject, follow_up: &str, record: &mut QueryRecord) {
        let started = Instant::now();
        let matrix = match downscale_object(object, self.config.matrix_long_side) {
            Ok(m) => m,
            Err(e) => {
                return record.fail(FailureKind::Internal, Stage::Localize, e.to_string(), UNPARSEABLE_ANSWER)
            }
        };
        let messages = build_stage2_prompt(&object.descriptor, follow_up, &serialize_matrix(&matrix), "")
            .expect("serialized matrix is never empty");
        let outcome = ask(self.backends.chat.as_ref(), messages, parse_stage2).await;
        record.timing.stage2 = started.elapsed();
        let stage2 = match outcome {
            Ok(out) => {
                record.exchanges.extend(out.exchanges);
                out.parsed
            }
            Err(err) => return record.fail_stage(Stage::Stage2, err),
        };
        record.stage2 = Some(stage2.clone());
        let answer = non_empty(&stage2.answer, UNPARSEABLE_ANSWER);

        let mask = match stage2.whole_segments {
            YesNo::Yes => upscale_selection(object, &stage2.which_segment),
            YesNo::No => region_to_mask(object, &matrix, &stage2.target_position),
        };
        match mask {
            Ok(mask) => {
                record.result.answer_text = answer;
                if stage2.whole_segments == YesNo::Yes {
                    let mut segments = stage2.which_segment.clone();
                    segments.sort_unstable();
                    segments.dedup();
                    record.result.segments = segments;
                }
                if mask.count() > 0 {
                    record.status = QueryStatus::Highlighted;
                    record.result.highlight_mask = Some(mask);
                } else {
                    record.status = QueryStatus::Answered;
                }
            }
            Err(e) => record.fail(
                FailureKind::InvalidSelection,
                Stage::Localize,
                e.to_string(),
                &format!("{answer} (the highlighted region could not be located: {e})"),
            ),
        }
    }
}
