//! HTTP facade over the engine for the painter UI.
//!
//! Images travel as base64 PNG strings inside JSON bodies. Every error
//! response has the shape `{code, message, detail}`.

mod error;
mod routes;
mod state;

use std::net::SocketAddr;

use axum::http::{HeaderValue, Method};
use axum::Router;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

pub use error::{ApiError, ApiResult};
pub use state::{AppState, JobStatus, ServiceConfig, Session};

pub const DEFAULT_BIND: &str = "127.0.0.1";
pub const DEFAULT_PORT: u16 = 8787;

/// Builds the application router, including CORS and `/ui` static files
/// when configured.
pub fn router(state: AppState) -> Router {
    let config = state.config().clone();
    let mut app = routes::api().with_state(state);
    if let Some(dir) = &config.ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    if let Some(origin) = &config.cors_origin {
        let cors = CorsLayer::new()
            .allow_methods([Method::GET, Method::POST])
            .allow_headers(Any);
        let cors = match origin.as_str() {
            "*" => cors.allow_origin(Any),
            o => match HeaderValue::from_str(o) {
                Ok(v) => cors.allow_origin(v),
                Err(_) => cors,
            },
        };
        app = app.layer(cors);
    }
    app
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
