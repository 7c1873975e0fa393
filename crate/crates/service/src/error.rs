use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};

use actpaint_core::Error as EngineError;

/// An error response: HTTP status plus the `{code, message, detail}` body.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
            .with_detail(json!({ "kind": what, "id": id }))
    }

    pub fn session_expired(id: &str) -> Self {
        Self::new(StatusCode::GONE, "session_expired", format!("session `{id}` expired"))
            .with_detail(json!({ "session_id": id }))
    }

    pub fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        use EngineError::*;
        let message = e.to_string();
        let (status, code, detail) = match &e {
            UnknownLayer(name) => (StatusCode::NOT_FOUND, "unknown_layer", json!({ "layer": name })),
            UnknownVector(id) => (StatusCode::NOT_FOUND, "unknown_vector", json!({ "vector_id": id })),
            UnknownInput(name) => (StatusCode::NOT_FOUND, "unknown_input", json!({ "input": name })),
            MixedLayers { first, second } => (
                StatusCode::CONFLICT,
                "mixed_layers",
                json!({ "layers": [first, second] }),
            ),
            OutOfRange(_) => (StatusCode::UNPROCESSABLE_ENTITY, "out_of_range", Value::Null),
            DanglingLabel { label } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "dangling_label",
                json!({ "label": label }),
            ),
            UnmatchedColor { x, y, r, g, b } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "unmatched_color",
                json!({ "x": x, "y": y, "color": [r, g, b] }),
            ),
            ShapeMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "shape_mismatch", Value::Null),
            InvalidArgument { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_argument", Value::Null),
            Precondition(_) => (StatusCode::UNPROCESSABLE_ENTITY, "precondition", Value::Null),
            DegenerateMask(_) => (StatusCode::UNPROCESSABLE_ENTITY, "degenerate_mask", Value::Null),
            DegenerateVector { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "degenerate_vector", Value::Null),
            Image(_) => (StatusCode::UNPROCESSABLE_ENTITY, "bad_image", Value::Null),
            NonFinite { .. } | NonFiniteLoss { .. } => {
                (StatusCode::INTERNAL_SERVER_ERROR, "non_finite", Value::Null)
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal", Value::Null),
        };
        Self {
            status,
            code,
            message,
            detail,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
