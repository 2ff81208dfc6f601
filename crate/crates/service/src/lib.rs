//! HTTP front end for the keyfield pipeline.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/sessions` | multipart, field `image` |
//! | GET | `/sessions/{id}` | |
//! | POST | `/sessions/{id}/queries` | `{"question": "..."}` |
//! | GET | `/sessions/{id}/queries/{qid}/overlay` | |
//! | GET | `/healthz` | |
//!
//! Handlers hold no state of their own: every request reads the session
//! from the store, so a restarted server answers exactly as before.

use std::env;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::DefaultBodyLimit;
use axum::http::HeaderValue;
use axum::routing::{get, post};
use axum::Router;
use keyfield::Pipeline;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub mod api;
pub mod error;
pub mod store;

pub use error::{ApiError, ErrorCode};
pub use store::SessionStore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub port: u16,
    pub session_dir: PathBuf,
    pub max_upload_bytes: usize,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            session_dir: PathBuf::from("sessions"),
            max_upload_bytes: 10 * 1024 * 1024,
            cors_origin: None,
        }
    }
}

impl ServiceConfig {
    /// Reads `PORT`, `SESSION_DIR`, `MAX_UPLOAD_MB` and `CORS_ORIGIN`.
    pub fn from_env() -> Result<Self, String> {
        let var = |k: &str| env::var(k).ok().filter(|v| !v.trim().is_empty());
        let mut cfg = Self::default();
        if let Some(p) = var("PORT") {
            cfg.port = p.parse().map_err(|_| format!("PORT: {p:?}"))?;
        }
        if let Some(d) = var("SESSION_DIR") {
            cfg.session_dir = PathBuf::from(d);
        }
        if let Some(mb) = var("MAX_UPLOAD_MB") {
            let mb: f64 = mb.parse().map_err(|_| format!("MAX_UPLOAD_MB: {mb:?}"))?;
            if mb.is_nan() || mb <= 0.0 {
                return Err("MAX_UPLOAD_MB must be positive".into());
            }
            cfg.max_upload_bytes = (mb * 1024.0 * 1024.0) as usize;
        }
        cfg.cors_origin = var("CORS_ORIGIN");
        Ok(cfg)
    }
}

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub store: SessionStore,
    pub config: Arc<ServiceConfig>,
}

impl AppState {
    pub async fn new(pipeline: Pipeline, config: ServiceConfig) -> std::io::Result<Self> {
        let store = SessionStore::open(&config.session_dir).await?;
        Ok(Self {
            pipeline: Arc::new(pipeline),
            store,
            config: Arc::new(config),
        })
    }
}

pub fn router(state: AppState) -> Router {
    let origin = match state
        .config
        .cors_origin
        .as_deref()
        .and_then(|o| HeaderValue::from_str(o).ok())
    {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::from(Any),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods(Any)
        .allow_headers(Any);
    // room for multipart framing on top of the image itself
    let body_limit = state.config.max_upload_bytes + 64 * 1024;

    Router::new()
        .route("/sessions", post(api::create_session))
        .route("/sessions/{id}", get(api::get_session))
        .route("/sessions/{id}/queries", post(api::create_query))
        .route("/sessions/{id}/queries/{qid}/overlay", get(api::get_overlay))
        .route("/healthz", get(api::healthz))
        .fallback(api::not_found)
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(cors)
        .with_state(state)
}
