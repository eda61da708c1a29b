//! JSON-over-HTTP front for [`ReviewStore`].

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ReviewStore, ServiceError};
use crate::corpus::Example;
use crate::review::AnnotationRecord;

pub const TOKEN_HEADER: &str = "x-cartoforge-token";

/// Static tokens. With no worker tokens configured, authentication is off.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AuthConfig {
    /// worker id -> token
    pub workers: BTreeMap<String, String>,
    /// Token for import and export. Unset means those routes are open.
    pub admin: Option<String>,
}

#[derive(Clone)]
struct AppState {
    store: Arc<ReviewStore>,
    auth: Arc<AuthConfig>,
    guidelines: Arc<String>,
}

struct ApiError(StatusCode, String, String);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let (status, kind) = match &e {
            ServiceError::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            ServiceError::NotAssigned { .. } => (StatusCode::FORBIDDEN, "not_assigned"),
            ServiceError::Duplicate { .. } => (StatusCode::CONFLICT, "duplicate"),
            ServiceError::ImportConflict(_) => (StatusCode::CONFLICT, "import_conflict"),
            ServiceError::EmptyWorker => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError(status, kind.into(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "message": self.2}))).into_response()
    }
}

fn unauthorized() -> ApiError {
    ApiError(StatusCode::UNAUTHORIZED, "unauthorized".into(), "missing or wrong token".into())
}

fn token(headers: &HeaderMap) -> Option<&str> {
    headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok())
}

fn check_worker(auth: &AuthConfig, headers: &HeaderMap, worker: &str) -> Result<(), ApiError> {
    if auth.workers.is_empty() {
        return Ok(());
    }
    match (auth.workers.get(worker), token(headers)) {
        (Some(want), Some(got)) if want == got => Ok(()),
        _ => Err(unauthorized()),
    }
}

fn check_admin(auth: &AuthConfig, headers: &HeaderMap) -> Result<(), ApiError> {
    match &auth.admin {
        None => Ok(()),
        Some(want) if token(headers) == Some(want.as_str()) => Ok(()),
        Some(_) => Err(unauthorized()),
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn import(State(st): State<AppState>, headers: HeaderMap, Json(examples): Json<Vec<Example>>) -> Result<Response, ApiError> {
    check_admin(&st.auth, &headers)?;
    Ok(Json(st.store.import_tasks(&examples)?).into_response())
}

#[derive(Deserialize)]
struct NextQuery {
    worker: String,
}

async fn next(State(st): State<AppState>, headers: HeaderMap, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    check_worker(&st.auth, &headers, &q.worker)?;
    Ok(match st.store.next_task(&q.worker)? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn annotate(State(st): State<AppState>, headers: HeaderMap, Json(rec): Json<AnnotationRecord>) -> Result<Response, ApiError> {
    check_worker(&st.auth, &headers, &rec.worker_id)?;
    st.store.submit_annotation(rec)?;
    Ok(Json(json!({"ok": true})).into_response())
}

async fn export(State(st): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    check_admin(&st.auth, &headers)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], st.store.export_jsonl()).into_response())
}

async fn stats(State(st): State<AppState>) -> Response {
    Json(st.store.stats()).into_response()
}

async fn guidelines(State(st): State<AppState>) -> Response {
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], st.guidelines.as_str().to_owned()).into_response()
}

pub fn router(store: Arc<ReviewStore>, auth: AuthConfig, guidelines_text: String) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/tasks/import", post(import))
        .route("/api/tasks/next", get(next))
        .route("/api/annotations", post(annotate))
        .route("/api/export", get(export))
        .route("/api/stats", get(stats))
        .route("/api/guidelines", get(guidelines))
        .with_state(AppState {
            store,
            auth: Arc::new(auth),
            guidelines: Arc::new(guidelines_text),
        })
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Blocking entry point for the CLI: binds `addr` and serves until Ctrl-C.
pub fn run_blocking(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("review service listening on {}", listener.local_addr()?);
        serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}
