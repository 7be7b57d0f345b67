use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{message}")]
    Invalid { message: String, violations: Vec<String> },
    #[error("{0}")]
    Internal(String),
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    violations: &'a [String],
}

impl ApiError {
    pub fn invalid(message: impl Into<String>) -> Self {
        ApiError::Invalid {
            message: message.into(),
            violations: Vec::new(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Invalid { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.to_string();
        let violations = match &self {
            ApiError::Invalid { violations, .. } => violations.as_slice(),
            _ => &[],
        };
        let body = Json(Body {
            error: &message,
            violations,
        });
        (self.status(), body).into_response()
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

/// Core errors raised while validating client input. Anything that points at
/// a broken workspace file should be mapped to `Internal` by the caller.
impl From<efumi_core::Error> for ApiError {
    fn from(e: efumi_core::Error) -> Self {
        use efumi_core::Error as E;
        match e {
            E::MalformedHeader(_) | E::Truncated { .. } | E::Json(_) => ApiError::BadRequest(e.to_string()),
            E::Io(_) => ApiError::Internal(e.to_string()),
            other => ApiError::invalid(other.to_string()),
        }
    }
}
