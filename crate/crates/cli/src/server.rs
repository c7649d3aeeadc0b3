use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use vfiqa_core::annotation::{AnnotationService, NextTriplet, ServiceError};
use vfiqa_core::dataset::Choice;

pub type SharedService = Arc<Mutex<AnnotationService>>;

#[derive(Debug, Deserialize)]
pub struct JudgmentRequest {
    pub session: String,
    pub triplet_id: String,
    pub choice: Choice,
}

struct ApiError(StatusCode, String);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::Unauthorized(_) => StatusCode::UNAUTHORIZED,
            ServiceError::UnknownTriplet(_) => StatusCode::NOT_FOUND,
            ServiceError::Duplicate { .. } | ServiceError::NotAssigned { .. } => StatusCode::CONFLICT,
            ServiceError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{e}");
        }
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn lock(service: &SharedService) -> std::sync::MutexGuard<'_, AnnotationService> {
    // a panic mid-request leaves the queue consistent with the log
    service.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

async fn next_triplet(State(service): State<SharedService>, Path(annotator): Path<String>) -> Result<Response, ApiError> {
    let next = lock(&service).next_triplet(&annotator)?;
    let body = match next {
        NextTriplet::Triplet(t) => json!({ "status": "ok", "triplet": t }),
        NextTriplet::NoneRemaining => json!({ "status": "none_remaining" }),
    };
    Ok(Json(body).into_response())
}

async fn judgment(State(service): State<SharedService>, Json(req): Json<JudgmentRequest>) -> Result<Response, ApiError> {
    let ack = lock(&service).record_judgment(&req.session, &req.triplet_id, req.choice)?;
    Ok(Json(ack).into_response())
}

async fn clip_frame(State(service): State<SharedService>, Path(path): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("no frame at /clips/{path}"));
    let file = lock(&service).frame_file(&path).ok_or_else(not_found)?;
    let bytes = tokio::fs::read(&file).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

pub fn router(service: SharedService) -> Router {
    Router::new()
        .route("/api/session/{annotator}/next", get(next_triplet))
        .route("/api/judgment", post(judgment))
        .route("/clips/{*path}", get(clip_frame))
        .with_state(service)
}

pub async fn serve(service: AnnotationService, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let app = router(Arc::new(Mutex::new(service)));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation server listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
