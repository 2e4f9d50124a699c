//! HTTP front end for the tool index.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use toolforge_core::retrieval::{
    normalize, render_information_block, Embedder, RankedHit, RetrievalError, VectorIndex,
};

use crate::config::MAX_K;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone)]
pub struct ServiceState {
    pub index: Arc<VectorIndex<f64>>,
    pub embedder: Arc<dyn Embedder<f64>>,
}

#[derive(Debug, Deserialize)]
pub struct RetrieveRequest {
    pub query: String,
    pub k: usize,
    #[serde(default)]
    pub domain: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RetrieveReply {
    pub hits: Vec<RankedHit<f64>>,
    pub information: String,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        let status = match e {
            RetrievalError::Remote(_) => StatusCode::BAD_GATEWAY,
            RetrievalError::Embed(_) | RetrievalError::Dimension { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

/// Runs one request against the index. `domain` restricts hits to a single
/// category.
pub fn answer(
    state: &ServiceState,
    request: &RetrieveRequest,
) -> Result<RetrieveReply, RetrievalError> {
    let mut vector = state.embedder.embed(&request.query)?;
    if vector.len() != state.index.dims() {
        return Err(RetrievalError::Dimension {
            expected: state.index.dims(),
            actual: vector.len(),
        });
    }
    normalize(&mut vector);
    let catalog = state.index.catalog().clone();
    let hits = match request.domain.as_deref() {
        None => state.index.search_vector(&vector, request.k, |_| true)?,
        Some(domain) => state.index.search_vector(&vector, request.k, |id| {
            catalog.get(id).is_some_and(|r| r.category == domain)
        })?,
    };
    let information = render_information_block(&hits, &catalog)?;
    Ok(RetrieveReply { hits, information })
}

async fn retrieve(
    State(state): State<ServiceState>,
    Json(request): Json<RetrieveRequest>,
) -> Result<Json<RetrieveReply>, ApiError> {
    if !(1..=MAX_K).contains(&request.k) {
        return Err(ApiError(
            StatusCode::BAD_REQUEST,
            format!("k = {} must be in 1..={MAX_K}", request.k),
        ));
    }
    let reply = tokio::task::spawn_blocking(move || answer(&state, &request))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(reply))
}

async fn healthz(State(state): State<ServiceState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "tools": state.index.len() }))
}

async fn version() -> Json<serde_json::Value> {
    Json(json!({ "name": "toolforge", "version": VERSION }))
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/retrieve", post(retrieve))
        .route("/healthz", get(healthz))
        .route("/version", get(version))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: ServiceState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
