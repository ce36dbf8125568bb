//! HTTP session service: create interactive agent sessions, post doctor
//! instructions (including mid-scan) and stream turns and robot state as
//! server-sent events.
//!
//! Routes:
//!
//! | method | path                          | purpose                          |
//! |--------|-------------------------------|----------------------------------|
//! | POST   | `/sessions`                   | create a session (201 `{id}`)    |
//! | POST   | `/sessions/{id}/instructions` | start or steer the executor      |
//! | GET    | `/sessions/{id}/events`       | event stream with full backfill  |
//! | GET    | `/sessions/{id}/state`        | robot state and trace so far     |
//! | DELETE | `/sessions/{id}`              | cancel and remove                |

mod session;

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sonoscan_core::llm::BackendSpec;
use sonoscan_core::prompt::DoctorInstruction;
use sonoscan_core::{BodyRegion, ExecutorConfig, KnowledgeBase, RobotState, Turn};
use thiserror::Error;

use session::{Session, SessionParams};
pub use session::{SessionEvent, SessionStatus, SessionSummary, StateSnapshot};

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("no session {0:?}")]
    NotFound(String),
    #[error("session {0:?} is finished")]
    Finished(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Finished(_) => StatusCode::CONFLICT,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    /// Directory receiving one append-only JSONL event log per session.
    pub trace_dir: Option<PathBuf>,
    /// Executor configuration for sessions that do not send their own.
    pub default_config: ExecutorConfig,
}

#[derive(Clone)]
pub struct AppState {
    kb: Arc<KnowledgeBase>,
    sessions: Arc<RwLock<HashMap<String, Arc<Session>>>>,
    options: Arc<ServiceOptions>,
}

impl AppState {
    pub fn new(kb: KnowledgeBase, options: ServiceOptions) -> Self {
        Self {
            kb: Arc::new(kb),
            sessions: Arc::default(),
            options: Arc::new(options),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_owned()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    /// `scripted:<path>` or `remote:<endpoint>`.
    pub backend: String,
    /// Target body region of the scan task.
    pub region: String,
    /// Selects `<task_id>.jsonl` when a scripted backend names a directory.
    #[serde(default)]
    pub task_id: Option<String>,
    #[serde(default)]
    pub config: Option<ExecutorConfig>,
    /// Pause between turns, during which the session is
    /// `awaiting_instruction`.
    #[serde(default)]
    pub turn_delay_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionRequest {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionResponse {
    /// `started` for the first instruction, `queued` afterwards.
    pub status: String,
    pub instruction_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionStateResponse {
    pub id: String,
    pub status: SessionStatus,
    pub region: BodyRegion,
    pub digest: String,
    pub state: RobotState,
    pub instructions: Vec<DoctorInstruction>,
    pub turns: Vec<Turn>,
    pub summary: Option<SessionSummary>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/instructions", post(post_instruction))
        .route("/sessions/{id}/events", get(stream_events))
        .route("/sessions/{id}/state", get(get_state))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn create_session(
    State(app): State<AppState>,
    Json(req): Json<CreateSessionRequest>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let bad = |m: String| ApiError::BadRequest(m);
    let backend: BackendSpec = req.backend.parse().map_err(|e| bad(format!("{e}")))?;
    backend.check().map_err(|e| bad(e.to_string()))?;
    if matches!(&backend, BackendSpec::Scripted(p) if p.is_dir()) {
        let path = backend
            .transcript_path(req.task_id.as_deref())
            .ok_or_else(|| bad("a scripted backend directory needs a task_id".into()))?;
        if !path.is_file() {
            return Err(bad(format!("no transcript at {}", path.display())));
        }
    }
    let region: BodyRegion = req.region.parse().map_err(bad)?;
    let config = req
        .config
        .unwrap_or_else(|| app.options.default_config.clone());
    config.validate().map_err(|e| bad(e.to_string()))?;

    let id = uuid::Uuid::new_v4().to_string();
    let session = Session::new(
        id.clone(),
        SessionParams {
            region,
            backend,
            task_id: req.task_id,
            config,
            turn_delay: Duration::from_millis(req.turn_delay_ms),
            trace_dir: app.options.trace_dir.clone(),
        },
    );
    app.sessions
        .write()
        .unwrap_or_else(|p| p.into_inner())
        .insert(id.clone(), Arc::new(session));
    Ok((StatusCode::CREATED, Json(CreateSessionResponse { id })))
}

async fn post_instruction(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<InstructionRequest>,
) -> Result<(StatusCode, Json<InstructionResponse>), ApiError> {
    let session = app.session(&id)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::BadRequest("instruction text is empty".into()));
    }
    let mut inner = session.lock();
    let instruction_index = inner.accepted_instructions;
    let status = match inner.status {
        SessionStatus::Finished => return Err(ApiError::Finished(id)),
        SessionStatus::Idle => {
            inner.status = SessionStatus::Running;
            let worker = Arc::clone(&session);
            let kb = Arc::clone(&app.kb);
            let text = req.text;
            tokio::task::spawn_blocking(move || worker.run_worker(kb, text));
            "started"
        }
        SessionStatus::Running | SessionStatus::AwaitingInstruction => {
            inner.pending.push(req.text);
            "queued"
        }
    };
    inner.accepted_instructions += 1;
    Ok((
        StatusCode::ACCEPTED,
        Json(InstructionResponse {
            status: status.into(),
            instruction_index,
        }),
    ))
}

async fn get_state(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionStateResponse>, ApiError> {
    let session = app.session(&id)?;
    let inner = session.lock();
    Ok(Json(SessionStateResponse {
        id: session.id.clone(),
        status: inner.status,
        region: session.region,
        digest: inner.state.digest(),
        state: inner.state.clone(),
        instructions: inner.instructions.clone(),
        turns: inner.turns.clone(),
        summary: inner.summary.clone(),
    }))
}

async fn delete_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    let session = app
        .sessions
        .write()
        .unwrap_or_else(|p| p.into_inner())
        .remove(&id)
        .ok_or_else(|| ApiError::NotFound(id.clone()))?;
    session.cancel();
    let mut inner = session.lock();
    if inner.status == SessionStatus::Idle {
        let summary = Session::cancelled_summary(&inner);
        session.finish(&mut inner, summary);
    }
    Ok(StatusCode::NO_CONTENT)
}

fn frame(index: usize, event: &SessionEvent) -> Result<Event, Infallible> {
    let data = serde_json::to_string(event).expect("events serialize");
    Ok(Event::default()
        .id(index.to_string())
        .event(event.kind())
        .data(data))
}

async fn stream_events(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let session = app.session(&id)?;
    let rx = session.subscribe();
    let batches = stream::unfold(
        (session, rx, 0usize),
        |(session, mut rx, cursor)| async move {
            loop {
                let (batch, finished) = {
                    let inner = session.lock();
                    let batch: Vec<_> = inner.events[cursor..]
                        .iter()
                        .enumerate()
                        .map(|(i, e)| frame(cursor + i, e))
                        .collect();
                    (batch, inner.status == SessionStatus::Finished)
                };
                if !batch.is_empty() {
                    let next = cursor + batch.len();
                    return Some((stream::iter(batch), (session, rx, next)));
                }
                if finished || rx.changed().await.is_err() {
                    return None;
                }
            }
        },
    );
    Ok(Sse::new(batches.flatten()).keep_alive(KeepAlive::default()))
}
