//! HTTP API and server-sent event stream. See `docs/API.md`.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio_stream::wrappers::errors::BroadcastStreamRecvError;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};

use hapsy_core::{ConfigError, ExperimentConfig};

use crate::engine::{EngineError, Input, Phase, Presentation, ProtocolError, SessionExports, Submission};
use crate::session::SessionError;
use crate::store::{SessionHandle, SessionSnapshot, SessionStore};

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self { status, error, message: message.into(), field: None }
    }

    fn config(e: ConfigError) -> Self {
        Self {
            field: e.path().map(str::to_string),
            ..Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let conflict = |code| ApiError::new(StatusCode::CONFLICT, code, e.to_string());
        match &e {
            SessionError::Engine(EngineError::Config(c)) => ApiError::config(c.clone()),
            SessionError::Protocol(p) => match p {
                ProtocolError::Terminal(_) => conflict("terminal"),
                ProtocolError::NoPendingPresentation => conflict("no_pending_presentation"),
                ProtocolError::StalePresentation { .. } => conflict("stale_presentation"),
                ProtocolError::WrongInput { .. } => conflict("wrong_input"),
                ProtocolError::EmptyToken => ApiError::new(StatusCode::BAD_REQUEST, "empty_token", e.to_string()),
                ProtocolError::Ordering(_) | ProtocolError::Staircase(_) => conflict("invalid_action"),
            },
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    pub client_token: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Config as JSON; omitted sections take defaults.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    /// Config as TOML text, as in a config file.
    #[serde(default)]
    pub config_toml: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub token: String,
    pub phase: Phase,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PendingResponse {
    pub phase: Phase,
    pub pending: Option<Presentation>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub duplicate: bool,
    pub phase: Phase,
    pub last_seq: u64,
    pub pending: Option<Presentation>,
}

#[derive(Debug, Deserialize)]
pub struct AbortRequest {
    pub token: String,
    #[serde(default)]
    pub reason: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct TokenQuery {
    pub token: Option<String>,
}

type Shared = Arc<SessionStore>;

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(read))
        .route("/sessions/{id}/pending", get(pending))
        .route("/sessions/{id}/responses", post(submit))
        .route("/sessions/{id}/abort", post(abort))
        .route("/sessions/{id}/summary", get(summary))
        .route("/sessions/{id}/exports/{name}", get(export))
        .route("/sessions/{id}/log", get(log_file))
        .route("/sessions/{id}/events", get(events))
        .with_state(store)
}

pub async fn serve(store: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}

fn parse_config(req: &CreateRequest) -> Result<ExperimentConfig, ApiError> {
    match (&req.config, &req.config_toml) {
        (Some(_), Some(_)) => {
            Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "give either config or config_toml, not both"))
        }
        (Some(json), None) => {
            serde_json::from_value(json.clone()).map_err(|e| ApiError::config(ConfigError::Parse(e.to_string())))
        }
        (None, Some(toml)) => ExperimentConfig::from_toml(toml).map_err(ApiError::config),
        (None, None) => Ok(ExperimentConfig::default()),
    }
}

async fn create(State(store): State<Shared>, Json(req): Json<CreateRequest>) -> Result<Response, ApiError> {
    let config = parse_config(&req)?;
    let created = store.create(config, req.seed, req.client_token)?;
    let status = if created.existing { StatusCode::OK } else { StatusCode::CREATED };
    let body = CreateResponse { session_id: created.session_id, token: created.token, phase: created.phase };
    Ok((status, Json(body)).into_response())
}

/// Session lookup plus per-session token check (bearer header or
/// `?token=` for event-stream clients).
fn authorize(
    store: &SessionStore,
    id: &str,
    headers: &HeaderMap,
    query: &TokenQuery,
) -> Result<Arc<SessionHandle>, ApiError> {
    let handle =
        store.get(id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}")))?;
    let bearer =
        headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
    match bearer.or(query.token.as_deref()) {
        Some(t) if handle.check_token(t) => Ok(handle),
        _ => Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong session token")),
    }
}

async fn read(
    State(store): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> Result<Json<SessionSnapshot>, ApiError> {
    let h = authorize(&store, &id, &headers, &q)?;
    Ok(Json((*h.snapshot()).clone()))
}

async fn pending(
    State(store): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> Result<Json<PendingResponse>, ApiError> {
    let snap = authorize(&store, &id, &headers, &q)?.snapshot();
    Ok(Json(PendingResponse { phase: snap.view.phase, pending: snap.view.pending.clone() }))
}

fn submit_on(h: &SessionHandle, sub: &Submission) -> Result<Json<SubmitResponse>, ApiError> {
    let done = h.submit(sub)?;
    let snap = h.snapshot();
    Ok(Json(SubmitResponse {
        duplicate: done.duplicate,
        phase: snap.view.phase,
        last_seq: snap.last_seq,
        pending: snap.view.pending.clone(),
    }))
}

async fn submit(
    State(store): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
    Json(sub): Json<Submission>,
) -> Result<Json<SubmitResponse>, ApiError> {
    let h = authorize(&store, &id, &headers, &q)?;
    submit_on(&h, &sub)
}

async fn abort(
    State(store): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
    Json(req): Json<AbortRequest>,
) -> Result<Json<SubmitResponse>, ApiError> {
    let h = authorize(&store, &id, &headers, &q)?;
    let reason = req.reason.unwrap_or_else(|| "aborted by operator".into());
    submit_on(&h, &Submission { token: req.token, presentation_id: None, input: Input::Abort { reason } })
}

async fn summary(
    State(store): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> Result<Response, ApiError> {
    let h = authorize(&store, &id, &headers, &q)?;
    Ok(Json(h.snapshot().summary.clone()).into_response())
}

async fn export(
    State(store): State<Shared>,
    Path((id, name)): Path<(String, String)>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> Result<Response, ApiError> {
    let h = authorize(&store, &id, &headers, &q)?;
    if !SessionExports::FILE_NAMES.contains(&name.as_str()) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no export named {name}")));
    }
    let exports = h.exports();
    let body = exports.get(&name).expect("known name").to_string();
    let mime = match name.rsplit('.').next() {
        Some("csv") => "text/csv",
        Some("svg") => "image/svg+xml",
        _ => "application/json",
    };
    Ok(([(header::CONTENT_TYPE, mime)], body).into_response())
}

async fn log_file(
    State(store): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> Result<Response, ApiError> {
    let h = authorize(&store, &id, &headers, &q)?;
    let bytes =
        h.log_bytes().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response())
}

fn snapshot_event(snap: &SessionSnapshot) -> Event {
    Event::default().event("snapshot").id(snap.last_seq.to_string()).json_data(snap).expect("snapshot serializes")
}

/// A `snapshot` event, then every logged event as it is committed. Event
/// names are the event kinds; ids are sequence numbers.
async fn events(
    State(store): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let h = authorize(&store, &id, &headers, &q)?;
    // Subscribe before reading the snapshot so no event falls in between.
    let rx = h.subscribe();
    let snap = h.snapshot();
    let after = snap.last_seq;
    let first = tokio_stream::once(Ok(snapshot_event(&snap)));
    let live = BroadcastStream::new(rx).filter_map(move |msg| match msg {
        Ok(e) if e.seq <= after => None,
        Ok(e) => Some(Ok(Event::default()
            .event(e.event.kind())
            .id(e.seq.to_string())
            .json_data(&*e)
            .expect("events serialize"))),
        // A slow client missed events: resynchronize with a fresh snapshot.
        Err(BroadcastStreamRecvError::Lagged(_)) => Some(Ok(snapshot_event(&h.snapshot()))),
    });
    Ok(Sse::new(first.chain(live)).keep_alive(KeepAlive::default()))
}
