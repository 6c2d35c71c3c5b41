use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ClickInput, QueryStrategy, SessionConfig, Store};
use crate::acquisition::AcquisitionMethod;
use crate::error::Error;
use crate::experiment::RefineMode;
use crate::raster::class_palette;

/// Machine-readable error codes carried in every error body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    InvalidArgument,
    ShapeMismatch,
    InvalidPayload,
    Busy,
    NotUndoable,
    Unavailable,
    Diverged,
    Internal,
}

impl ErrorCode {
    pub fn of(error: &Error) -> Self {
        match error.root() {
            Error::NotFound(_) => Self::NotFound,
            Error::Busy(_) => Self::Busy,
            Error::NotUndoable(_) => Self::NotUndoable,
            Error::Unavailable(_) => Self::Unavailable,
            Error::Shape(_) => Self::ShapeMismatch,
            Error::Image(_) | Error::Checkpoint(_) | Error::LabelOutOfRange { .. } => Self::InvalidPayload,
            Error::InvalidArgument(_)
            | Error::ClickOutOfBounds { .. }
            | Error::ClassOutOfRange { .. }
            | Error::Config(_)
            | Error::MissingContext(_)
            | Error::UnexpectedContext(_)
            | Error::Json(_) => Self::InvalidArgument,
            Error::NonFiniteLoss { .. } => Self::Diverged,
            _ => Self::Internal,
        }
    }

    pub fn status(self) -> StatusCode {
        match self {
            Self::NotFound => StatusCode::NOT_FOUND,
            Self::InvalidArgument | Self::ShapeMismatch | Self::InvalidPayload => StatusCode::BAD_REQUEST,
            Self::Busy | Self::NotUndoable => StatusCode::CONFLICT,
            Self::Unavailable | Self::Diverged => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

struct ApiError {
    error: Error,
    config_hash: Option<String>,
}

impl From<Error> for ApiError {
    fn from(error: Error) -> Self {
        Self {
            error,
            config_hash: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = ErrorCode::of(&self.error);
        let mut body = json!({ "error": { "code": code, "message": self.error.to_string() } });
        if let Some(h) = self.config_hash {
            body["config_hash"] = Value::String(h);
        }
        (code.status(), Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| Error::InvalidArgument(format!("request body: {e}")).into())
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::from(Error::InvalidArgument(format!("worker failed: {e}"))))?
}

fn with_hash(mut value: Value, hash: &str) -> Response {
    value["config_hash"] = Value::String(hash.to_string());
    Json(value).into_response()
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/images", post(register_image))
        .route("/checkpoints", post(register_checkpoint))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/clicks", post(submit_clicks))
        .route("/sessions/{id}/refine", post(refine))
        .route("/sessions/{id}/prediction", get(prediction))
        .route("/sessions/{id}/uncertainty", get(uncertainty))
        .route("/sessions/{id}/queries", get(queries))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/reset", post(reset))
        .layer(DefaultBodyLimit::max(512 << 20))
        .with_state(store)
}

pub async fn serve(store: Arc<Store>, addr: SocketAddr) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(store))
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}

async fn register_image(State(store): State<Arc<Store>>, body: Bytes) -> ApiResult {
    let reg = blocking(move || Ok(store.register_image(&body)?)).await?;
    Ok((StatusCode::CREATED, Json(reg)).into_response())
}

async fn register_checkpoint(State(store): State<Arc<Store>>, body: Bytes) -> ApiResult {
    let reg = blocking(move || Ok(store.register_checkpoint(&body)?)).await?;
    Ok((StatusCode::CREATED, Json(reg)).into_response())
}

async fn create_session(State(store): State<Arc<Store>>, body: Bytes) -> ApiResult {
    let config: SessionConfig = parse_body(&body)?;
    let view = blocking(move || Ok(store.create_session(config)?.view())).await?;
    let mean_entropy = crate::acquisition::entropy(&view.prediction).mean();
    let body = json!({
        "session_id": view.session_id,
        "config_hash": view.config_hash,
        "height": view.image.height(),
        "width": view.image.width(),
        "classes": view.model.classes(),
        "initial_mean_entropy": mean_entropy,
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn session_summary(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult {
    let handle = store.session(&id)?;
    let v = handle.view();
    Ok(with_hash(
        json!({
            "session_id": v.session_id,
            "checkpoint_id": v.checkpoint_id,
            "image_id": v.image_id,
            "clicks": v.clicks,
            "total_clicks": v.clicks.len(),
            "clicks_applied": v.applied,
            "snapshot_depth": v.snapshot_depth,
            "state_hash": v.state_hash,
            "busy": handle.is_busy(),
        }),
        &v.config_hash,
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClicksBody {
    clicks: Vec<ClickInput>,
}

fn tagged(hash: &str) -> impl Fn(ApiError) -> ApiError + '_ {
    move |mut e| {
        e.config_hash = Some(hash.to_string());
        e
    }
}

fn session_error(hash: &str) -> impl Fn(Error) -> ApiError + '_ {
    move |error| ApiError {
        error,
        config_hash: Some(hash.to_string()),
    }
}

async fn submit_clicks(State(store): State<Arc<Store>>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let handle = store.session(&id)?;
    let hash = handle.view().config_hash.clone();
    let parsed: ClicksBody = parse_body(&body).map_err(tagged(&hash))?;
    let h = Arc::clone(&handle);
    let pending = blocking(move || h.mutate(|s| s.submit_clicks(&parsed.clicks)).map_err(ApiError::from))
        .await
        .map_err(tagged(&hash))?;
    let v = handle.view();
    Ok(with_hash(
        json!({ "total_clicks": v.clicks.len(), "pending_clicks": pending }),
        &hash,
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RefineBody {
    mode: RefineMode,
}

async fn refine(State(store): State<Arc<Store>>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let handle = store.session(&id)?;
    let hash = handle.view().config_hash.clone();
    let mode = parse_body::<RefineBody>(&body)
        .map_err(tagged(&hash))?
        .mode;
    let outcome = blocking(move || store.refine(&handle, mode).map_err(ApiError::from))
        .await
        .map_err(tagged(&hash))?;
    Ok(with_hash(serde_json::to_value(outcome).expect("outcome serializes"), &hash))
}

async fn prediction(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult {
    let v = store.session(&id)?.view();
    let labels: Vec<u8> = v.prediction.argmax().iter().copied().collect();
    Ok(with_hash(
        json!({
            "height": v.prediction.height(),
            "width": v.prediction.width(),
            "classes": v.prediction.class_count(),
            "encoding": "u8_row_major_base64",
            "labels": B64.encode(labels),
            "palette": class_palette(v.prediction.class_count()),
            "clicks_applied": v.applied,
        }),
        &v.config_hash,
    ))
}

fn param<'a>(params: &'a HashMap<String, String>, key: &str) -> Result<&'a str, Error> {
    params
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::InvalidArgument(format!("missing query parameter {key:?}")))
}

async fn uncertainty(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult {
    let v = store.session(&id)?.view();
    let hash = v.config_hash.clone();
    let method: AcquisitionMethod = param(&params, "method")
        .and_then(str::parse)
        .map_err(session_error(&hash))?;
    let map = blocking(move || v.uncertainty(method).map_err(ApiError::from))
        .await
        .map_err(tagged(&hash))?;
    let mut sorted: Vec<f64> = map.scores.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let decile = sorted[((0.9 * sorted.len() as f64) as usize).min(sorted.len() - 1)];
    let bytes: Vec<u8> = map.scores.iter().flat_map(|&s| (s as f32).to_le_bytes()).collect();
    Ok(with_hash(
        json!({
            "method": method,
            "height": map.scores.nrows(),
            "width": map.scores.ncols(),
            "encoding": "f32_le_row_major_base64",
            "scores": B64.encode(bytes),
            "mean": map.mean(),
            "min": sorted[0],
            "max": sorted[sorted.len() - 1],
            "top_decile_threshold": decile,
            "wall_time": map.wall_time,
        }),
        &hash,
    ))
}

async fn queries(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult {
    let v = store.session(&id)?.view();
    let hash = v.config_hash.clone();
    let parsed = (|| -> Result<(String, QueryStrategy, usize), Error> {
        let name = param(&params, "strategy").unwrap_or("entropy").to_string();
        let strategy = name.parse()?;
        let k = match params.get("k") {
            Some(k) => k
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("k must be a non-negative integer, got {k:?}")))?,
            None => v.grid.len(),
        };
        Ok((name, strategy, k))
    })()
    .map_err(session_error(&hash))?;
    let (name, strategy, k) = parsed;
    let list = blocking(move || v.queries(strategy, k).map_err(ApiError::from))
        .await
        .map_err(tagged(&hash))?;
    Ok(with_hash(json!({ "strategy": name, "queries": list }), &hash))
}

async fn undo(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult {
    let handle = store.session(&id)?;
    let hash = handle.view().config_hash.clone();
    let outcome = blocking(move || handle.mutate(|s| s.undo_last()).map_err(ApiError::from))
        .await
        .map_err(tagged(&hash))?;
    Ok(with_hash(serde_json::to_value(outcome).expect("outcome serializes"), &hash))
}

async fn reset(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult {
    let handle = store.session(&id)?;
    let hash = handle.view().config_hash.clone();
    blocking(move || handle.mutate(|s| s.reset()).map_err(ApiError::from))
        .await
        .map_err(tagged(&hash))?;
    Ok(with_hash(json!({ "total_clicks": 0, "snapshot_depth": 0 }), &hash))
}
