use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Wire error body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("task {task} was not issued to session {session}")]
    UnknownTask { session: String, task: String },
    #[error("{message}")]
    Validation { message: String, detail: Value },
    #[error("no ratings have been recorded")]
    EmptyReport,
    #[error("invalid study: {0}")]
    Config(String),
    #[error("rating log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ApiError>;

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSession(_) | ApiError::UnknownTask { .. } => StatusCode::NOT_FOUND,
            ApiError::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::EmptyReport => StatusCode::CONFLICT,
            ApiError::Config(_) | ApiError::Log(_) | ApiError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownSession(_) => "unknown_session",
            ApiError::UnknownTask { .. } => "unknown_task",
            ApiError::Validation { .. } => "validation",
            ApiError::EmptyReport => "empty_report",
            ApiError::Config(_) => "config",
            ApiError::Log(_) | ApiError::Io(_) => "storage",
        }
    }

    pub fn body(&self) -> ErrorBody {
        let detail = match self {
            ApiError::Validation { detail, .. } => detail.clone(),
            ApiError::UnknownSession(s) => serde_json::json!({ "session_id": s }),
            ApiError::UnknownTask { session, task } => serde_json::json!({ "session_id": session, "task_id": task }),
            _ => Value::Null,
        };
        ErrorBody {
            code: self.code().to_owned(),
            message: self.to_string(),
            detail,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}
