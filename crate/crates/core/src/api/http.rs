use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use super::{ApiError, ControlPlane, CreateRun, RunControlCommand};
use crate::analytics::AnalyticsError;
use crate::domain::{AgentState, Uid};
use crate::intervention::{InterventionError, InterventionRequest};
use crate::persistence::{EventFilter, PersistenceError};

pub const API_VERSION: &str = "v1";

#[derive(Serialize)]
struct Envelope<T> {
    api_version: &'static str,
    data: T,
}

fn ok<T: Serialize>(data: T) -> Response {
    Json(Envelope {
        api_version: API_VERSION,
        data,
    })
    .into_response()
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownRun(_) | ApiError::UnknownAgent(_) => StatusCode::NOT_FOUND,
            ApiError::IllegalTransition { .. }
            | ApiError::ReadOnly(_)
            | ApiError::Analytics(AnalyticsError::StepNotReached { .. }) => StatusCode::CONFLICT,
            ApiError::InvalidConfig(_) | ApiError::Intervention(_) => StatusCode::BAD_REQUEST,
            ApiError::Analytics(_) | ApiError::Persistence(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownRun(_) => "unknown_run",
            ApiError::UnknownAgent(_) => "unknown_agent",
            ApiError::InvalidConfig(_) => "invalid_config",
            ApiError::IllegalTransition { .. } => "illegal_transition",
            ApiError::ReadOnly(_) => "read_only",
            ApiError::Analytics(AnalyticsError::StepNotReached { .. }) => "step_not_reached",
            ApiError::Intervention(InterventionError::PastStep { .. }) => "past_step",
            ApiError::Intervention(_) => "invalid_intervention",
            ApiError::Analytics(_) => "analytics",
            ApiError::Persistence(PersistenceError::VersionMismatch { .. }) => "version_mismatch",
            ApiError::Persistence(_) => "persistence",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "api_version": API_VERSION,
            "error": { "code": self.code(), "message": self.to_string() },
        });
        (self.status(), Json(body)).into_response()
    }
}

type Plane = State<Arc<ControlPlane>>;
type ApiResult = Result<Response, ApiError>;

/// Runs read-side work off the async workers; replays can take a while.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.expect("blocking task panicked")
}

async fn console() -> Html<&'static str> {
    Html(concat!(
        "<!doctype html><title>mmo-sim</title>",
        "<p>Monitoring console placeholder. The JSON API lives under <code>/runs</code>.</p>",
    ))
}

async fn create_run(State(cp): Plane, Json(req): Json<CreateRun>) -> ApiResult {
    let summary = blocking(move || {
        let id = cp.create(req)?;
        Ok(cp.get(&id)?.summary())
    })
    .await?;
    Ok((StatusCode::CREATED, ok(summary)).into_response())
}

async fn list_runs(State(cp): Plane) -> ApiResult {
    Ok(ok(cp.list()))
}

async fn get_run(State(cp): Plane, Path(id): Path<String>) -> ApiResult {
    Ok(ok(cp.get(&id)?.summary()))
}

async fn control(State(cp): Plane, Path(id): Path<String>, Json(cmd): Json<RunControlCommand>) -> ApiResult {
    let h = cp.get(&id)?;
    let status = h.control(cmd)?;
    Ok(ok(json!({ "run_id": id, "status": status })))
}

async fn timeline(State(cp): Plane, Path(id): Path<String>) -> ApiResult {
    Ok(ok(cp.get(&id)?.timeline()))
}

#[derive(Deserialize)]
struct StepQuery {
    step: Option<u64>,
    window: Option<u64>,
    state: Option<AgentState>,
}

async fn stats(State(cp): Plane, Path(id): Path<String>, Query(q): Query<StepQuery>) -> ApiResult {
    let h = cp.get(&id)?;
    Ok(ok(blocking(move || h.stats(q.step, q.window)).await?))
}

async fn agents(State(cp): Plane, Path(id): Path<String>, Query(q): Query<StepQuery>) -> ApiResult {
    let h = cp.get(&id)?;
    Ok(ok(blocking(move || h.agents_by_state(q.step, q.state)).await?))
}

async fn agent(State(cp): Plane, Path((id, uid)): Path<(String, u32)>, Query(q): Query<StepQuery>) -> ApiResult {
    let h = cp.get(&id)?;
    Ok(ok(blocking(move || h.agent_detail(Uid(uid), q.step)).await?))
}

async fn intervene(State(cp): Plane, Path(id): Path<String>, Json(req): Json<InterventionRequest>) -> ApiResult {
    let scheduled = cp.get(&id)?.intervene(req)?;
    Ok((StatusCode::ACCEPTED, ok(scheduled)).into_response())
}

async fn query_events(State(cp): Plane, Path(id): Path<String>, Query(f): Query<EventFilter>) -> ApiResult {
    let h = cp.get(&id)?;
    Ok(ok(blocking(move || Ok(h.query(&f))).await?))
}

#[derive(Deserialize)]
struct StreamQuery {
    #[serde(default)]
    from_seq: u64,
}

fn sse(e: &crate::domain::Event) -> Result<SseEvent, Infallible> {
    Ok(SseEvent::default().id(e.seq.to_string()).data(e.to_line()))
}

/// Backlog from `from_seq`, then live events. A subscriber that falls more
/// than the buffer behind is disconnected and can reconnect with the last
/// seq it saw.
async fn stream_events(
    State(cp): Plane,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ApiError> {
    let (backlog, rx) = cp.get(&id)?.subscribe(q.from_seq);
    let backlog = stream::iter(backlog.iter().map(sse).collect::<Vec<_>>());
    let live = stream::unfold(rx, |mut rx| async move {
        match rx.recv().await {
            Ok(e) => Some((sse(&e), rx)),
            Err(RecvError::Lagged(_) | RecvError::Closed) => None,
        }
    });
    Ok(Sse::new(backlog.chain(live)).keep_alive(KeepAlive::default()))
}

pub fn router(cp: Arc<ControlPlane>) -> Router {
    Router::new()
        .route("/", get(console))
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/control", post(control))
        .route("/runs/{id}/timeline", get(timeline))
        .route("/runs/{id}/stats", get(stats))
        .route("/runs/{id}/agents", get(agents))
        .route("/runs/{id}/agents/{uid}", get(agent))
        .route("/runs/{id}/interventions", post(intervene))
        .route("/runs/{id}/events", get(query_events))
        .route("/runs/{id}/events/stream", get(stream_events))
        .with_state(cp)
}

/// Serves the API until the process is stopped.
pub async fn serve(cp: Arc<ControlPlane>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(cp)).await
}
