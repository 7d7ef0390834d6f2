//! HTTP generation service: `POST /api/generate` and `GET /api/health`.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bashcomment_core::checkpoint::file_sha256;
use bashcomment_core::pipeline::{Model, Repository, INDEX_FILE, MODEL_FILE};
use log::{error, info, warn};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

pub const MAX_CODE_CHARS: usize = 2048;
pub const MAX_BEAM_SIZE: usize = 64;

/// A model and repository ready to serve.
pub struct Loaded {
    pub model: Model,
    pub repository: Repository,
    pub beam_size: usize,
    pub model_sha256: String,
    pub index_sha256: String,
}

impl Loaded {
    pub fn from_dir(dir: &Path, beam_size: usize) -> bashcomment_core::Result<Self> {
        let model_sha256 = file_sha256(&dir.join(MODEL_FILE))?;
        let index_sha256 = file_sha256(&dir.join(INDEX_FILE))?;
        let model = Model::load(dir)?;
        let repository = Repository::load(dir, &model)?;
        Ok(Self { model, repository, beam_size, model_sha256, index_sha256 })
    }
}

/// Immutable state shared by all requests. `loaded` is `None` when the model
/// failed to load at startup.
pub struct ServiceState {
    pub loaded: Option<Loaded>,
}

impl ServiceState {
    /// Loads from `dir`, starting unloaded (and answering 503) on failure.
    pub fn from_dir(dir: &Path, beam_size: usize) -> Self {
        match Loaded::from_dir(dir, beam_size) {
            Ok(l) => {
                info!("loaded model from {} ({} exemplars)", dir.display(), l.repository.len());
                Self { loaded: Some(l) }
            }
            Err(e) => {
                warn!("model not loaded from {}: {e}", dir.display());
                Self { loaded: None }
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct GenerateRequest {
    code: String,
    beam_size: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Health {
    status: &'static str,
    model_loaded: bool,
    model_sha256: Option<String>,
    index_sha256: Option<String>,
    repository_size: usize,
    ablation: Option<&'static str>,
}

fn error(status: StatusCode, message: &str) -> Response {
    (status, Json(serde_json::json!({ "error": message }))).into_response()
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<Health> {
    let l = state.loaded.as_ref();
    Json(Health {
        status: if l.is_some() { "ok" } else { "unloaded" },
        model_loaded: l.is_some(),
        model_sha256: l.map(|l| l.model_sha256.clone()),
        index_sha256: l.map(|l| l.index_sha256.clone()),
        repository_size: l.map_or(0, |l| l.repository.len()),
        ablation: l.map(|l| l.model.ablation.name()),
    })
}

async fn generate(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let req: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, &format!("invalid request body: {e}")),
    };
    if req.code.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "code must not be empty");
    }
    if req.code.chars().count() > MAX_CODE_CHARS {
        return error(StatusCode::BAD_REQUEST, &format!("code exceeds {MAX_CODE_CHARS} characters"));
    }
    if matches!(req.beam_size, Some(b) if b == 0 || b > MAX_BEAM_SIZE) {
        return error(StatusCode::BAD_REQUEST, &format!("beam_size must be between 1 and {MAX_BEAM_SIZE}"));
    }
    if state.loaded.is_none() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model not loaded");
    }
    let job = tokio::task::spawn_blocking(move || {
        let l = state.loaded.as_ref().expect("checked above");
        l.model.generate(&l.repository, &req.code, req.beam_size.unwrap_or(l.beam_size), None)
    });
    match job.await {
        Ok(Ok(result)) => Json(result).into_response(),
        Ok(Err(e)) => {
            error!("generation failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        }
        Err(e) => {
            error!("generation task failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        }
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/api/generate", post(generate))
        .route("/api/health", get(health))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until interrupted.
pub async fn serve(state: Arc<ServiceState>, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
