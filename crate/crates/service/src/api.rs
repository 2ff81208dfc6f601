use axum::body::Bytes;
use axum::extract::multipart::MultipartRejection;
use axum::extract::{Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use keyfield::backends::BackendHealth;
use keyfield::pipeline::{FailureKind, QueryRecord, QueryStatus};
use keyfield::{Bbox, Session};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ErrorCode};
use crate::store::new_session_id;
use crate::AppState;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub id: usize,
    pub descriptor: String,
    pub bbox: Bbox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub scene_caption: String,
    pub objects: Vec<ObjectSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query_id: usize,
    pub answer_text: String,
    pub has_highlight: bool,
    pub overlay_url: String,
    pub segments: Vec<u32>,
}

/// A query that ran but degraded: the error plus what the user still gets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryError {
    #[serde(flatten)]
    pub error: ApiError,
    pub query_id: usize,
    pub answer_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: SessionCreated,
    pub queries: Vec<QueryResponse>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendsHealth {
    pub segmenter: BackendHealth,
    pub captioner: BackendHealth,
    pub chat: BackendHealth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub backends: BackendsHealth,
}

fn summary(session: &Session) -> SessionCreated {
    SessionCreated {
        session_id: session.session_id.clone(),
        scene_caption: session.scene_caption.clone(),
        objects: session
            .objects
            .iter()
            .map(|o| ObjectSummary {
                id: o.object_id,
                descriptor: o.descriptor.clone(),
                bbox: o.bbox,
            })
            .collect(),
    }
}

fn query_view(session_id: &str, record: &QueryRecord) -> QueryResponse {
    QueryResponse {
        query_id: record.query_id,
        answer_text: record.result.answer_text.clone(),
        has_highlight: record.result.has_highlight(),
        overlay_url: format!("/sessions/{session_id}/queries/{}/overlay", record.query_id),
        segments: record.result.segments.clone(),
    }
}

/// Failed records map onto an error status; invalid selections are still
/// a plain answer since the model replied and the text is usable.
fn failure_of(record: &QueryRecord) -> Option<ApiError> {
    if record.status != QueryStatus::Failed {
        return None;
    }
    let failure = record.failure.as_ref()?;
    let code = match failure.kind {
        FailureKind::BackendUnavailable => ErrorCode::BackendUnavailable,
        FailureKind::ParseFailure => ErrorCode::ParseFailure,
        FailureKind::Internal => ErrorCode::Internal,
        FailureKind::InvalidSelection => return None,
    };
    Some(ApiError::new(code, failure.message.clone()).at(failure.stage))
}

async fn read_image(mut multipart: Multipart) -> Result<Vec<u8>, ApiError> {
    let bad = |e: axum::extract::multipart::MultipartError| {
        ApiError::invalid(format!("unreadable upload: {}", e.body_text()))
    };
    let mut fallback = None;
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        let named_image = field.name() == Some("image");
        let is_file = field.file_name().is_some();
        let bytes = field.bytes().await.map_err(bad)?;
        if named_image {
            return Ok(bytes.to_vec());
        }
        if is_file && fallback.is_none() {
            fallback = Some(bytes.to_vec());
        }
    }
    fallback.ok_or_else(|| ApiError::invalid("multipart body has no image field"))
}

pub async fn create_session(
    State(state): State<AppState>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let multipart = multipart.map_err(|e| ApiError::invalid(e.body_text()))?;
    let image = read_image(multipart).await?;
    if image.is_empty() {
        return Err(ApiError::invalid("uploaded image is empty"));
    }
    if image.len() > state.config.max_upload_bytes {
        return Err(ApiError::invalid(format!(
            "image exceeds the {} byte limit",
            state.config.max_upload_bytes
        )));
    }
    let mut session = state.pipeline.detect_objects(image).await?;
    session.session_id = new_session_id();
    state.store.create(&session).await?;
    tracing::info!(session = %session.session_id, objects = session.objects.len(), "session created");
    Ok((StatusCode::CREATED, Json(summary(&session))))
}

pub async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    let session = state
        .store
        .load(&id)
        .await?
        .ok_or_else(|| ApiError::not_found("session"))?;
    Ok(Json(SessionView {
        session: summary(&session),
        queries: session.history.iter().map(|r| query_view(&id, r)).collect(),
    }))
}

pub async fn create_query(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let lock = state.store.lock(&id);
    let _guard = lock.lock().await;
    let mut session = state
        .store
        .load(&id)
        .await?
        .ok_or_else(|| ApiError::not_found("session"))?;
    let request: QueryRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::invalid(format!("expected {{\"question\": ...}}: {e}")))?;
    let record = state
        .pipeline
        .answer_query(&mut session, &request.question)
        .await?
        .clone();
    state
        .store
        .write_overlay(&id, record.query_id, &record.result.annotated_image)
        .await?;
    state.store.save(&session).await?;

    let view = query_view(&id, &record);
    Ok(match failure_of(&record) {
        None => Json(view).into_response(),
        Some(error) => (
            error.code.status(),
            Json(QueryError {
                error,
                query_id: view.query_id,
                answer_text: view.answer_text,
            }),
        )
            .into_response(),
    })
}

pub async fn get_overlay(
    State(state): State<AppState>,
    Path((id, query_id)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let query_id: usize = query_id.parse().map_err(|_| ApiError::not_found("query"))?;
    if state.store.load(&id).await?.is_none() {
        return Err(ApiError::not_found("session"));
    }
    let png = state
        .store
        .read_overlay(&id, query_id)
        .await?
        .ok_or_else(|| ApiError::not_found("query"))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub async fn healthz(State(state): State<AppState>) -> Json<Health> {
    let b = state.pipeline.backends();
    let (segmenter, captioner, chat) =
        tokio::join!(b.segmenter.health(), b.captioner.health(), b.chat.health());
    let all_ok = [segmenter, captioner, chat]
        .iter()
        .all(|h| *h == BackendHealth::Ok);
    Json(Health {
        status: if all_ok { "ok" } else { "degraded" }.to_string(),
        backends: BackendsHealth {
            segmenter,
            captioner,
            chat,
        },
    })
}

pub async fn not_found() -> ApiError {
    ApiError::not_found("route")
}
