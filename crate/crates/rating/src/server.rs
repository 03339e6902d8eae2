//! HTTP/JSON routes.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crate::error::ApiError;
use crate::study::{RatingSubmission, Study};

pub fn router(study: Arc<Study>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session", post(create_session))
        .route("/session/{id}/next", get(next_task))
        .route("/rating", post(submit_rating))
        .route("/aggregate", get(aggregate))
        .fallback(not_found)
        .with_state(study)
}

async fn health(State(study): State<Arc<Study>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "sessions": study.session_count() }))
}

async fn create_session(State(study): State<Arc<Study>>) -> Result<Response, ApiError> {
    let id = study.create_session()?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn next_task(State(study): State<Arc<Study>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(match study.next_task(&id)? {
        Some(task) => Json(task).into_response(),
        None => Json(json!({ "done": true })).into_response(),
    })
}

async fn submit_rating(State(study): State<Arc<Study>>, body: Bytes) -> Result<Response, ApiError> {
    let submission: RatingSubmission = serde_json::from_slice(&body).map_err(|e| ApiError::Validation {
        message: format!("malformed rating: {e}"),
        detail: json!({ "line": e.line(), "column": e.column() }),
    })?;
    let ack = tokio::task::spawn_blocking(move || study.submit(submission))
        .await
        .map_err(|e| ApiError::Log(e.to_string()))??;
    Ok(Json(ack).into_response())
}

async fn aggregate(State(study): State<Arc<Study>>) -> Result<Response, ApiError> {
    Ok(Json(study.aggregate()?).into_response())
}

async fn not_found() -> Response {
    let body = json!({ "code": "not_found", "message": "no such route", "detail": null });
    (StatusCode::NOT_FOUND, Json(body)).into_response()
}

/// Binds `addr` and serves until the returned future is dropped or ctrl-c.
pub async fn serve(study: Arc<Study>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    serve_on(study, listener).await
}

pub async fn serve_on(study: Arc<Study>, listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(study))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
