//! Typed views of the two reply schemas.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::json::{tolerant_json_extract, ExtractError};
use crate::geometry::Bbox;
use crate::mask::TargetRegion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum YesNo {
    Yes,
    No,
}

impl YesNo {
    pub fn as_str(self) -> &'static str {
        match self {
            YesNo::Yes => "Yes",
            YesNo::No => "No",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetObject {
    pub object_id: usize,
    pub follow_up: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Reply {
    pub answer: YesNo,
    pub reply: String,
    pub objects: Vec<TargetObject>,
    pub positions: Vec<Bbox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Reply {
    pub answer: String,
    pub whole_segments: YesNo,
    pub which_segment: Vec<u32>,
    pub target_position: Vec<TargetRegion>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("missing key {0:?}")]
    MissingKey(&'static str),
    #[error("key {key:?}: {reason}")]
    InvalidValue { key: &'static str, reason: String },
    #[error("{0}")]
    Invariant(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplyError {
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Lowercases and turns punctuation into spaces, so `"Objects name"`,
/// `objects_name` and `"Objects-Name:"` all match.
pub fn normalize_key(key: &str) -> String {
    key.chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct Fields<'a>(HashMap<String, &'a Value>);

impl<'a> Fields<'a> {
    fn new(value: &'a Value) -> Result<Self, SchemaError> {
        let map = value
            .as_object()
            .ok_or_else(|| SchemaError::Invariant("reply is not an object".into()))?;
        Ok(Self(
            map.iter().map(|(k, v)| (normalize_key(k), v)).collect(),
        ))
    }

    fn get(&self, key: &'static str) -> Option<&'a Value> {
        self.0
            .get(&normalize_key(key))
            .copied()
            .filter(|v| !v.is_null())
    }

    fn require(&self, key: &'static str) -> Result<&'a Value, SchemaError> {
        self.get(key).ok_or(SchemaError::MissingKey(key))
    }
}

fn invalid(key: &'static str, reason: impl Into<String>) -> SchemaError {
    SchemaError::InvalidValue {
        key,
        reason: reason.into(),
    }
}

fn as_text(key: &'static str, v: &Value) -> Result<String, SchemaError> {
    match v {
        Value::String(s) => Ok(collapse_whitespace(s)),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(invalid(key, format!("expected text, got {other}"))),
    }
}

fn as_yes_no(key: &'static str, v: &Value) -> Result<YesNo, SchemaError> {
    match v {
        Value::Bool(true) => Ok(YesNo::Yes),
        Value::Bool(false) => Ok(YesNo::No),
        Value::String(s) => {
            let word = s.trim().trim_matches(|c: char| !c.is_alphanumeric());
            if word.eq_ignore_ascii_case("yes") {
                Ok(YesNo::Yes)
            } else if word.eq_ignore_ascii_case("no") {
                Ok(YesNo::No)
            } else {
                Err(invalid(key, format!("expected Yes or No, got {s:?}")))
            }
        }
        other => Err(invalid(key, format!("expected Yes or No, got {other}"))),
    }
}

/// Non-negative integer, accepting numeric strings and integral floats.
fn as_uint(key: &'static str, v: &Value) -> Result<u64, SchemaError> {
    let bad = || invalid(key, format!("expected a non-negative integer, got {v}"));
    match v {
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                Ok(u)
            } else {
                match n.as_f64() {
                    Some(f) if f >= 0.0 && f.fract() == 0.0 && f <= u32::MAX as f64 => Ok(f as u64),
                    _ => Err(bad()),
                }
            }
        }
        Value::String(s) => s.trim().parse::<u64>().map_err(|_| bad()),
        _ => Err(bad()),
    }
}

fn as_u32(key: &'static str, v: &Value) -> Result<u32, SchemaError> {
    u32::try_from(as_uint(key, v)?).map_err(|_| invalid(key, "value too large"))
}

fn as_list<'v>(key: &'static str, v: &'v Value) -> Result<&'v [Value], SchemaError> {
    v.as_array()
        .map(Vec::as_slice)
        .ok_or_else(|| invalid(key, format!("expected a list, got {v}")))
}

/// Accepts `[[...], [...]]`, and a bare `[...]` of scalars as one entry.
fn as_nested_list<'v>(key: &'static str, v: &'v Value) -> Result<Vec<&'v [Value]>, SchemaError> {
    let items = as_list(key, v)?;
    if !items.is_empty() && items.iter().all(|i| !i.is_array()) {
        return Ok(vec![items]);
    }
    items.iter().map(|i| as_list(key, i)).collect()
}

fn parse_bbox(key: &'static str, coords: &[Value]) -> Result<Bbox, SchemaError> {
    if coords.len() != 4 {
        return Err(invalid(key, format!("expected 4 coordinates, got {}", coords.len())));
    }
    let c: Vec<u32> = coords
        .iter()
        .map(|v| as_u32(key, v))
        .collect::<Result<_, _>>()?;
    Ok(Bbox::new(c[0], c[1], c[2], c[3]).normalized())
}

impl Stage1Reply {
    pub fn from_value(value: &Value) -> Result<Self, SchemaError> {
        let f = Fields::new(value)?;
        let answer = as_yes_no("Answer", f.require("Answer")?)?;
        let reply = as_text("Reply", f.require("Reply")?)?;

        let objects = match f.get("Objects name") {
            None => Vec::new(),
            Some(v) => as_nested_list("Objects name", v)?
                .into_iter()
                .map(|entry| match entry {
                    [id, question, ..] => Ok(TargetObject {
                        object_id: as_uint("Objects name", id)? as usize,
                        follow_up: as_text("Objects name", question)?,
                    }),
                    _ => Err(invalid("Objects name", "expected [object id, question]")),
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        let positions = match f.get("Position") {
            None => Vec::new(),
            Some(v) => as_nested_list("Position", v)?
                .into_iter()
                .map(|c| parse_bbox("Position", c))
                .collect::<Result<Vec<_>, _>>()?,
        };
        if objects.len() != positions.len() {
            return Err(SchemaError::Invariant(format!(
                "{} objects but {} positions",
                objects.len(),
                positions.len()
            )));
        }
        Ok(Self {
            answer,
            reply,
            objects,
            positions,
        })
    }

    /// Strict JSON in the schema the stage-1 prompt asks for.
    pub fn to_json(&self) -> Value {
        json!({
            "Answer": self.answer.as_str(),
            "Reply": self.reply,
            "Objects name": self
                .objects
                .iter()
                .map(|o| json!([o.object_id, o.follow_up]))
                .collect::<Vec<_>>(),
            "Position": self.positions.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect::<Vec<_>>(),
        })
    }
}

impl Stage2Reply {
    pub fn from_value(value: &Value) -> Result<Self, SchemaError> {
        let f = Fields::new(value)?;
        let answer = as_text("answer", f.require("answer")?)?;
        let whole_segments = as_yes_no("whole segments", f.require("whole segments")?)?;
        let which_segment = match f.get("which segment") {
            None => Vec::new(),
            Some(v @ (Value::Number(_) | Value::String(_))) => vec![as_u32("which segment", v)?],
            Some(v) => as_list("which segment", v)?
                .iter()
                .map(|s| as_u32("which segment", s))
                .collect::<Result<_, _>>()?,
        };
        let target_position = match f.get("target position") {
            None => Vec::new(),
            Some(v) => as_nested_list("target position", v)?
                .into_iter()
                .map(|c| {
                    let c: Vec<u32> = c
                        .iter()
                        .map(|v| as_u32("target position", v))
                        .collect::<Result<_, _>>()?;
                    match c[..] {
                        [x, y] => Ok(TargetRegion::Point { x, y }),
                        [x1, y1, x2, y2] => Ok(TargetRegion::Rect { x1, y1, x2, y2 }),
                        _ => Err(invalid(
                            "target position",
                            "expected [x, y] or [x1, y1, x2, y2]",
                        )),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        match whole_segments {
            YesNo::Yes if which_segment.is_empty() => Err(SchemaError::Invariant(
                "whole segments is Yes but which segment is empty".into(),
            )),
            YesNo::No if target_position.is_empty() => Err(SchemaError::Invariant(
                "whole segments is No but target position is empty".into(),
            )),
            _ => Ok(Self {
                answer,
                whole_segments,
                which_segment,
                target_position,
            }),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "answer": self.answer,
            "whole segments": self.whole_segments.as_str(),
            "which segment": self.which_segment,
            "target position": self
                .target_position
                .iter()
                .map(|t| match *t {
                    TargetRegion::Point { x, y } => vec![x, y],
                    TargetRegion::Rect { x1, y1, x2, y2 } => vec![x1, y1, x2, y2],
                })
                .collect::<Vec<_>>(),
        })
    }
}

pub fn parse_stage1(reply: &str) -> Result<Stage1Reply, ReplyError> {
    Ok(Stage1Reply::from_value(&tolerant_json_extract(reply)?)?)
}

pub fn parse_stage2(reply: &str) -> Result<Stage2Reply, ReplyError> {
    Ok(Stage2Reply::from_value(&tolerant_json_extract(reply)?)?)
}
