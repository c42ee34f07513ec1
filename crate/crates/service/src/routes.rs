//! HTTP routes under `/v1`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;

use crate::api::{ApiError, SessionConfig, SessionSummary, SessionView, SubmitRequest, SubmitResponse};
use crate::store::Store;

type Shared = Arc<Store>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::from_json(&e))
}

async fn create(State(store): State<Shared>, body: Bytes) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let config: SessionConfig = parse(&body)?;
    Ok((StatusCode::CREATED, Json(store.create(config).await?)))
}

async fn list(State(store): State<Shared>) -> Json<Vec<SessionSummary>> {
    Json(store.list())
}

async fn show(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(store.get(&id)?.as_ref().clone()))
}

async fn submit(State(store): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Json<SubmitResponse>, ApiError> {
    let request: SubmitRequest = parse(&body)?;
    Ok(Json(SubmitResponse::from(&store.submit(&id, request).await?)))
}

async fn abort(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(store.abort(&id).await?))
}

async fn event_log(State(store): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], store.log_bytes(&id)?))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/v1/sessions", post(create).get(list))
        .route("/v1/sessions/{id}", get(show))
        .route("/v1/sessions/{id}/results", post(submit))
        .route("/v1/sessions/{id}/abort", post(abort))
        .route("/v1/sessions/{id}/log", get(event_log))
        .fallback(fallback)
        .with_state(store)
}
