//! HTTP front end: JSON task API, image serving and the static UI bundle.

use std::io::Cursor;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crate::store::{AnnotateError, AnnotationResult, AnnotationStore};

const FALLBACK_INDEX: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>TLV annotation</title></head>\n<body><h1>TLV annotation service</h1>\n<p>No UI bundle is configured. The JSON API is available at\n<code>GET /api/task</code>, <code>POST /api/annotation</code>,\n<code>GET /api/progress</code> and <code>GET /img/{id}</code>.</p></body></html>\n";

/// Shared service state. Leasing and submissions take the write lock;
/// progress and image reads share the read lock.
pub struct AppState {
    pub store: RwLock<AnnotationStore>,
    pub ui_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(store: AnnotationStore, ui_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            store: RwLock::new(store),
            ui_dir,
        })
    }
}

pub struct ApiError(StatusCode, String);

impl From<AnnotateError> for ApiError {
    fn from(e: AnnotateError) -> Self {
        let status = match &e {
            AnnotateError::UnknownRecord(_) => StatusCode::NOT_FOUND,
            AnnotateError::AlreadyFinal { .. } => StatusCode::CONFLICT,
            AnnotateError::Untouched(_)
            | AnnotateError::InvalidResult(_)
            | AnnotateError::BadBox { .. }
            | AnnotateError::Highlight(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AnnotateError::Image { .. } | AnnotateError::Dataset(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

/// Runs `f` on the blocking pool; store operations touch the filesystem.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(internal)?
}

async fn next_task(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    blocking(move || {
        let mut store = state.store.write().map_err(internal)?;
        Ok(Json(store.next_task()?).into_response())
    })
    .await
}

async fn submit(
    State(state): State<Arc<AppState>>,
    Json(result): Json<AnnotationResult>,
) -> Result<Response, ApiError> {
    blocking(move || {
        let mut store = state.store.write().map_err(internal)?;
        let record = store.submit(&result)?;
        log::info!("{} -> {}", record.id, record.status.as_str());
        Ok(Json(record).into_response())
    })
    .await
}

async fn progress(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let p = state.store.read().map_err(internal)?.progress();
    Ok(Json(p).into_response())
}

fn is_png(bytes: &[u8]) -> bool {
    bytes.starts_with(b"\x89PNG\r\n\x1a\n")
}

async fn vision_image(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let path = state.store.read().map_err(internal)?.vision_path(&id)?;
    let bytes = blocking(move || {
        let raw = std::fs::read(&path).map_err(internal)?;
        if is_png(&raw) {
            return Ok(raw);
        }
        let img = image::load_from_memory(&raw).map_err(internal)?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).map_err(internal)?;
        Ok(out.into_inner())
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json" | "map") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        Some("woff2") => "font/woff2",
        _ => "application/octet-stream",
    }
}

/// Maps a request path onto the UI directory, refusing anything that could
/// leave it.
fn ui_file(root: &Path, uri_path: &str) -> Option<PathBuf> {
    let rel = uri_path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

async fn static_ui(State(state): State<Arc<AppState>>, uri: Uri) -> Response {
    let Some(root) = &state.ui_dir else {
        return if uri.path() == "/" {
            ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], FALLBACK_INDEX).into_response()
        } else {
            StatusCode::NOT_FOUND.into_response()
        };
    };
    let Some(path) = ui_file(root, uri.path()) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/task", get(next_task))
        .route("/api/annotation", post(submit))
        .route("/api/progress", get(progress))
        .route("/img/{id}", get(vision_image))
        .fallback(static_ui)
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
