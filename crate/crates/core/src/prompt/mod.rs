//! The two chat rounds: object retrieval (stage 1) and key-field
//! localization over the segment matrix (stage 2).
//!
//! Templates live in `templates/*.v1.txt` and are reproduced verbatim,
//! typos included; recorded transcripts are keyed on the exact text.

use thiserror::Error;

use crate::backends::{BackendError, ChatExchange, ChatMessage, ChatModel};
use crate::mask::SemanticObject;

pub mod json;
pub mod reply;

pub use json::{tolerant_json_extract, ExtractError};
pub use reply::{
    parse_stage1, parse_stage2, ReplyError, SchemaError, Stage1Reply, Stage2Reply, TargetObject,
    YesNo,
};

pub const STAGE1_SYSTEM: &str = include_str!("../../templates/stage1_system.v1.txt");
pub const STAGE1_USER: &str = include_str!("../../templates/stage1_user.v1.txt");
pub const STAGE2_SYSTEM: &str = include_str!("../../templates/stage2_system.v1.txt");
pub const STAGE2_QUESTION: &str = include_str!("../../templates/stage2_question.v1.txt");
pub const STAGE2_MATRIX: &str = include_str!("../../templates/stage2_matrix.v1.txt");

/// Appended after an unparseable reply.
pub const CORRECTION: &str = "respond with valid JSON only, following the exact format";

/// Corrective re-prompts allowed per stage, on top of the first call.
pub const MAX_CORRECTIONS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("stage 1 needs at least one detected object")]
    NoObjects,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("shape matrix is empty")]
    EmptyMatrix,
}

/// Substitutes `{{name}}` slots in one pass; substituted text is never
/// rescanned.
pub fn render_template(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = &after[..end];
                match slots.iter().find(|(k, _)| *k == name) {
                    Some((_, value)) => out.push_str(value),
                    None => out.push_str(&rest[start..start + 2 + end + 2]),
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// One `[id] <n>[Description]:<descriptor>, Position:[x1, y1, x2, y2]` line
/// per object.
pub fn render_object_list(objects: &[SemanticObject]) -> String {
    objects
        .iter()
        .map(|o| {
            format!(
                "[id] {}[Description]:{}, Position:[{}, {}, {}, {}]",
                o.object_id, o.descriptor, o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_stage1_prompt(
    scene_caption: &str,
    objects: &[SemanticObject],
    question: &str,
) -> Result<Vec<ChatMessage>, PromptError> {
    if objects.is_empty() {
        return Err(PromptError::NoObjects);
    }
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    let list = render_object_list(objects);
    Ok(vec![
        ChatMessage::system(render_template(
            STAGE1_SYSTEM,
            &[("scene_caption", scene_caption), ("object_list", &list)],
        )),
        ChatMessage::user(render_template(STAGE1_USER, &[("question", question)])),
    ])
}

pub fn build_stage2_prompt(
    descriptor: &str,
    follow_up: &str,
    matrix_text: &str,
    ocr_text: &str,
) -> Result<Vec<ChatMessage>, PromptError> {
    if matrix_text.trim().is_empty() {
        return Err(PromptError::EmptyMatrix);
    }
    Ok(vec![
        ChatMessage::system(render_template(STAGE2_SYSTEM, &[("descriptor", descriptor)])),
        ChatMessage::user(render_template(STAGE2_QUESTION, &[("follow_up", follow_up)])),
        ChatMessage::user(render_template(
            STAGE2_MATRIX,
            &[("matrix", matrix_text), ("ocr_text", ocr_text)],
        )),
    ])
}

/// Result of one stage: the parsed reply plus every round it took.
#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub parsed: T,
    pub exchanges: Vec<ChatExchange>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("reply still unparseable after {attempts} calls: {last}")]
    Unparseable {
        attempts: usize,
        last: ReplyError,
        last_reply: String,
    },
}

/// Sends `messages` and parses the reply. An unparseable reply is followed
/// by the model's own answer and a [`CORRECTION`] turn, at most
/// [`MAX_CORRECTIONS`] times. Backend failures end the stage immediately.
pub async fn ask<T>(
    chat: &dyn ChatModel,
    mut messages: Vec<ChatMessage>,
    parse: impl Fn(&str) -> Result<T, ReplyError>,
) -> Result<StageOutcome<T>, StageError> {
    let mut exchanges = Vec::new();
    loop {
        let exchange = chat.complete(&messages).await?;
        let result = parse(&exchange.reply);
        let reply = exchange.reply.clone();
        exchanges.push(exchange);
        match result {
            Ok(parsed) => return Ok(StageOutcome { parsed, exchanges }),
            Err(err) if exchanges.len() > MAX_CORRECTIONS => {
                return Err(StageError::Unparseable {
                    attempts: exchanges.len(),
                    last: err,
                    last_reply: reply,
                })
            }
            Err(err) => {
                tracing::debug!(error = %err, "reply unparseable, re-prompting");
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(CORRECTION));
            }
        }
    }
}
