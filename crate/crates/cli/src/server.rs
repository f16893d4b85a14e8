//! HTTP API over shared orchestrator state, consumed by the web console.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{ConnectInfo, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::watch;
use toolsmith_core::approval::{ApprovalBroker, ApprovalDecision, ApprovalError, Verdict};
use toolsmith_core::config::Config;
use toolsmith_core::gateway::ProviderConfig;
use toolsmith_core::orchestrator::{Orchestrator, SessionHandle};
use toolsmith_core::registry::RegistryError;
use toolsmith_core::trace::{TraceEvent, TraceLog};
use toolsmith_core::vault::Secret;

use crate::settings::ServeFlags;

pub struct AppState {
    orch: Arc<Orchestrator>,
    provider: ProviderConfig,
    sessions: RwLock<HashMap<String, SessionHandle>>,
    static_dir: Option<PathBuf>,
}

impl AppState {
    fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }
}

type Shared = Arc<AppState>;

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<ApprovalError> for ApiError {
    fn from(e: ApprovalError) -> Self {
        let status = match e {
            ApprovalError::NotFound(_) => StatusCode::NOT_FOUND,
            ApprovalError::AlreadyDecided(_) => StatusCode::CONFLICT,
            ApprovalError::Invalid(_) => StatusCode::BAD_REQUEST,
            ApprovalError::TimedOut(_) | ApprovalError::Closed => StatusCode::GONE,
        };
        Self::new(status, e.to_string())
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/tasks", post(create_task))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/events", get(session_events))
        .route("/sessions/:id/report", get(session_report))
        .route("/approvals", get(list_approvals))
        .route("/approvals/:id", post(decide_approval))
        .route("/tools", get(list_tools))
        .route("/tools/:function_name", get(get_tool))
        .fallback(static_file)
        .with_state(state)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskBody {
    task: String,
}

async fn create_task(State(state): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let TaskBody { task } = parse_body(&body)?;
    if task.trim().is_empty() {
        return Err(ApiError::bad_request("task is blank"));
    }
    let mut provider = state
        .provider
        .build(state.orch.config().pricing.clone())
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let handle = state
        .orch
        .prepare(&task)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    state
        .sessions
        .write()
        .unwrap_or_else(|p| p.into_inner())
        .insert(handle.id.clone(), handle.clone());
    let id = handle.id.clone();
    let orch = state.orch.clone();
    tokio::task::spawn_blocking(move || {
        let report = orch.run(&handle, provider.as_mut());
        tracing::info!(session = %report.session_id, terminal = ?report.terminal, "session finished");
    });
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn get_session(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let handle = state.session(&id)?;
    let mut view = serde_json::to_value(handle.view()).expect("view serializes");
    let pending: Vec<String> = state
        .orch
        .broker()
        .pending()
        .into_iter()
        .filter(|r| r.session_id == id)
        .map(|r| r.id)
        .collect();
    view["pending_approvals"] = json!(pending);
    Ok(Json(view))
}

async fn session_report(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.session(&id)?;
    match handle.report() {
        Some(report) => Ok(Json(report).into_response()),
        None => Err(ApiError::new(StatusCode::CONFLICT, "session has not finished")),
    }
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

struct Cursor {
    trace: Arc<TraceLog>,
    after: u64,
    rx: watch::Receiver<usize>,
    buf: VecDeque<TraceEvent>,
}

fn sse_event(e: &TraceEvent) -> Event {
    Event::default()
        .id(e.seq.to_string())
        .event(e.event.name())
        .data(serde_json::to_string(e).expect("trace events serialize"))
}

/// Every event with `seq > after`, then live events until the trace closes.
fn event_stream(trace: Arc<TraceLog>, after: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = trace.subscribe();
    let cursor = Cursor {
        trace,
        after,
        rx,
        buf: VecDeque::new(),
    };
    futures::stream::unfold(cursor, |mut c| async move {
        loop {
            if let Some(e) = c.buf.pop_front() {
                c.after = e.seq;
                return Some((Ok(sse_event(&e)), c));
            }
            let closed = c.trace.is_closed();
            let fresh = c.trace.events_after(c.after);
            if !fresh.is_empty() {
                c.buf.extend(fresh);
                continue;
            }
            if closed || c.rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

async fn session_events(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<impl IntoResponse, ApiError> {
    let handle = state.session(&id)?;
    let resume = match headers.get("last-event-id") {
        Some(v) => Some(
            v.to_str()
                .ok()
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| ApiError::bad_request("Last-Event-ID must be an event sequence number"))?,
        ),
        None => None,
    };
    let after = resume.or(q.after).unwrap_or(0);
    Ok(Sse::new(event_stream(handle.trace.clone(), after)).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize)]
struct ApprovalsQuery {
    #[serde(default)]
    pending: bool,
}

async fn list_approvals(State(state): State<Shared>, Query(q): Query<ApprovalsQuery>) -> Json<Vec<Value>> {
    let items = state
        .orch
        .broker()
        .history()
        .into_iter()
        .filter(|(_, verdict)| !q.pending || verdict.is_none())
        .map(|(req, verdict)| {
            let mut v = serde_json::to_value(&req).expect("requests serialize");
            v["status"] = match verdict {
                None => json!("pending"),
                Some(verdict) => serde_json::to_value(verdict).expect("verdicts serialize"),
            };
            v
        })
        .collect();
    Json(items)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    verdict: Verdict,
    #[serde(default)]
    edited_source: Option<String>,
    #[serde(default)]
    keys: BTreeMap<String, String>,
}

async fn decide_approval(
    State(state): State<Shared>,
    Path(id): Path<String>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let body: DecisionBody = parse_body(&body)?;
    if !body.keys.is_empty() && !peer.ip().is_loopback() {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "API keys are only accepted from loopback clients",
        ));
    }
    let keys: Vec<Secret> = body.keys.into_iter().map(|(k, v)| Secret::new(k, v)).collect();
    let decision = ApprovalDecision {
        edited_source: body.edited_source,
        keys,
        ..ApprovalDecision::new(&id, body.verdict)
    };
    state.orch.broker().decide(decision)?;
    Ok(Json(json!({ "request_id": id, "verdict": body.verdict })))
}

async fn list_tools(State(state): State<Shared>) -> Json<Value> {
    Json(json!(state.orch.registry().snapshot().entries))
}

async fn get_tool(State(state): State<Shared>, Path(function_name): Path<String>) -> Result<Json<Value>, ApiError> {
    match state.orch.registry().fetch(&function_name) {
        Ok(record) => Ok(Json(serde_json::to_value(record).expect("records serialize"))),
        Err(RegistryError::NotFound(_)) => Err(ApiError::not_found(format!("no tool {function_name}"))),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

async fn static_file(State(state): State<Shared>, uri: Uri) -> Result<Response, ApiError> {
    let Some(root) = &state.static_dir else {
        return Err(ApiError::not_found("not found"));
    };
    let rel = PathBuf::from(uri.path().trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(ApiError::not_found("not found"));
    }
    let mut path = root.join(&rel);
    if rel.as_os_str().is_empty() || path.is_dir() {
        path = path.join("index.html");
    }
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response()),
        Err(_) => Err(ApiError::not_found("not found")),
    }
}

async fn shutdown_signal() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        tracing::error!(error = %e, "cannot listen for ctrl-c");
        std::future::pending::<()>().await;
    }
}

pub async fn serve(config: Config, flags: ServeFlags) -> anyhow::Result<()> {
    let provider = config
        .provider
        .clone()
        .ok_or_else(|| anyhow::anyhow!("no provider configured"))?;
    let broker = ApprovalBroker::new();
    let orch = Orchestrator::new(config, broker.clone())?;
    let state = Arc::new(AppState {
        orch: Arc::new(orch),
        provider,
        sessions: RwLock::new(HashMap::new()),
        static_dir: flags.static_dir,
    });
    let listener = tokio::net::TcpListener::bind(flags.bind).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(
        listener,
        router(state).into_make_service_with_connect_info::<SocketAddr>(),
    )
    .with_graceful_shutdown(shutdown_signal())
    .await?;
    broker.close();
    Ok(())
}
