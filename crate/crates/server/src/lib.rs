//! HTTP service hosting live grasping sessions.
//!
//! | method | path                           | body                                   |
//! |--------|--------------------------------|----------------------------------------|
//! | POST   | `/sessions`                    | `{"scene_id": ..}` or `{"scene": ..}`, optional `"config"` |
//! | GET    | `/sessions/{id}`               |                                        |
//! | POST   | `/sessions/{id}/intervention`  | `{"text": "apple on notebook"}`        |
//! | POST   | `/sessions/{id}/step`          |                                        |
//! | GET    | `/sessions/{id}/view`          |                                        |
//! | GET    | `/logs/{id}`                   |                                        |
//!
//! Errors come back as `{"error": {"code", "message", "details"}}`. Each
//! session's mutations are serialized and every event is appended to
//! `<log_dir>/<id>.jsonl` before the response is sent.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use graspwise_core::dataset::Corpus;
use graspwise_core::geometry::{AxisRect, Point, Quad};
use graspwise_core::lang::Source;
use graspwise_core::planner::ScoredGrasp;
use graspwise_core::scene::{ImageSize, ObjectId, Predicate, Scene};
use graspwise_core::session::{
    self, EventLog, EventPayload, Phase, SessionConfig, SessionError, SessionState, SystemClock,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Grasp overlays included in a view.
pub const VIEW_GRASPS: usize = 5;

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    pub log_dir: PathBuf,
    pub corpus: Option<Arc<Corpus>>,
    /// fsync every event, not just flush.
    pub durable: bool,
}

struct Entry {
    state: SessionState,
    log: EventLog,
}

pub struct AppState {
    config: ServerConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Entry>>>>,
    next_id: AtomicU64,
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("cannot create log directory {path}: {source}")]
    LogDir {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: Value::Null,
        }
    }

    fn details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}"))
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        match e {
            SessionError::Parse(p) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "parse_error", message)
                .details(json!({"kind": p.kind, "tokens": p.tokens})),
            SessionError::Phase { phase } => {
                Self::new(StatusCode::CONFLICT, "phase_error", message).details(json!({ "phase": phase }))
            }
            SessionError::InvalidScene(issues) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_scene", message).details(json!(issues))
            }
            SessionError::Config(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", message),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": {"code": self.code, "message": self.message, "details": self.details}
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub scene_id: Option<String>,
    pub scene: Option<Scene>,
    #[serde(default)]
    pub config: SessionConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewObject {
    pub id: ObjectId,
    pub class_name: String,
    pub bbox: AxisRect,
    pub graspable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRelation {
    pub subject: ObjectId,
    pub predicate: Predicate,
    pub object: ObjectId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDescription {
    pub text: String,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewGrounded {
    pub object_id: ObjectId,
    pub bbox: AxisRect,
    pub confidence: f64,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewGrasp {
    pub rank: usize,
    pub object_id: ObjectId,
    pub corners: [Point; 4],
    pub center: Point,
    pub theta: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEvent {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub phase: Phase,
    pub kind: String,
    pub summary: String,
}

/// Everything the operator console draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub session_id: String,
    pub scene_id: String,
    pub phase: Phase,
    pub image_size: ImageSize,
    pub objects: Vec<ViewObject>,
    /// Direct stacking edges, child on parent.
    pub stacking: Vec<ViewRelation>,
    pub relations: Vec<ViewRelation>,
    pub description: Option<ViewDescription>,
    pub grounded: Option<ViewGrounded>,
    pub grasps: Vec<ViewGrasp>,
    pub can_intervene: bool,
    pub can_step: bool,
    pub failure: Option<String>,
    pub success: Option<bool>,
    pub events: Vec<ViewEvent>,
}

fn event_summary(p: &EventPayload) -> (&'static str, String) {
    match p {
        EventPayload::Created { scene, .. } => ("created", format!("scene {}", scene.id)),
        EventPayload::Described { description } => (
            "described",
            description.as_ref().map_or("no description".to_string(), |d| d.text.clone()),
        ),
        EventPayload::ReviewRequested => ("review_requested", "awaiting review".to_string()),
        EventPayload::Intervened { text, .. } => ("intervened", text.clone()),
        EventPayload::Grounded { grounded, .. } => ("grounded", format!("object {}", grounded.object_id)),
        EventPayload::GroundingFailed { reason, .. } => ("grounding_failed", reason.clone()),
        EventPayload::Planned { total, .. } => ("planned", format!("{total} grasps")),
        EventPayload::PlanningFailed { reason } => ("planning_failed", reason.clone()),
        EventPayload::Executed { success, .. } => (
            "executed",
            if *success { "success" } else { "failure" }.to_string(),
        ),
    }
}

fn overlay(rank: usize, g: &ScoredGrasp) -> ViewGrasp {
    ViewGrasp {
        rank,
        object_id: g.object_id,
        corners: g.rect.corners(),
        center: g.rect.center(),
        theta: g.rect.theta,
        confidence: g.final_conf,
    }
}

pub fn view(state: &SessionState) -> View {
    let scene = &state.scene;
    let graph = scene.graph().unwrap_or_default();
    let free = graph.graspable(scene.objects.iter().map(|o| &o.id));
    let rel = |subject, predicate, object| ViewRelation {
        subject,
        predicate,
        object,
    };
    View {
        session_id: state.id.clone(),
        scene_id: scene.id.clone(),
        phase: state.phase,
        image_size: scene.image_size,
        objects: scene
            .objects
            .iter()
            .map(|o| ViewObject {
                id: o.id,
                class_name: o.class_name.clone(),
                bbox: o.bbox,
                graspable: free.contains(&o.id),
            })
            .collect(),
        stacking: scene.tree.edges.iter().map(|e| rel(e.child, Predicate::On, e.parent)).collect(),
        relations: graph.relations.iter().map(|r| rel(r.subject, r.predicate, r.object)).collect(),
        description: state.description.as_ref().map(|d| ViewDescription {
            text: d.text.clone(),
            source: d.source,
        }),
        grounded: state.grounded.as_ref().map(|g| ViewGrounded {
            object_id: g.object_id,
            bbox: g.region,
            confidence: g.confidence,
            ambiguous: g.ambiguous,
        }),
        grasps: state.ranked.iter().take(VIEW_GRASPS).enumerate().map(|(i, g)| overlay(i + 1, g)).collect(),
        can_intervene: matches!(state.phase, Phase::AwaitingReview | Phase::Failed),
        can_step: !matches!(state.phase, Phase::Executed | Phase::Failed),
        failure: state.failure.clone(),
        success: state.success,
        events: state
            .history
            .iter()
            .map(|e| {
                let (kind, summary) = event_summary(&e.payload);
                ViewEvent {
                    seq: e.seq,
                    timestamp_ms: e.timestamp_ms,
                    phase: e.phase,
                    kind: kind.to_string(),
                    summary,
                }
            })
            .collect(),
    }
}

impl AppState {
    pub fn new(config: ServerConfig) -> Result<Arc<Self>, ServerError> {
        std::fs::create_dir_all(&config.log_dir).map_err(|source| ServerError::LogDir {
            path: config.log_dir.clone(),
            source,
        })?;
        Ok(Arc::new(Self {
            config,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }))
    }

    fn entry(&self, id: &str) -> ApiResult<Arc<Mutex<Entry>>> {
        self.sessions.lock().get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.config.log_dir.join(format!("{id}.jsonl"))
    }
}

fn persist(entry: &mut Entry, from: u64) -> ApiResult<()> {
    for e in entry.state.events_since(from) {
        entry.log.append(e).map_err(|e| {
            log::error!("event log write failed: {e}");
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log_error", e.to_string())
        })?;
    }
    Ok(())
}

async fn create(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionState>)> {
    let Json(req) = body?;
    let scene = match (req.scene, req.scene_id) {
        (Some(scene), None) => scene,
        (None, Some(id)) => {
            let corpus = app.config.corpus.as_ref().ok_or_else(|| {
                ApiError::new(StatusCode::NOT_FOUND, "unknown_scene", "the service has no corpus loaded")
            })?;
            corpus
                .get(&id)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_scene", format!("no scene {id}")))?
                .scene()
        }
        _ => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_request",
                "give exactly one of scene_id and scene",
            ))
        }
    };
    let id = format!("s-{:06}", app.next_id.fetch_add(1, Ordering::Relaxed));
    let state = session::start(&id, scene, req.config, &mut SystemClock)?;
    let log = EventLog::open(app.log_path(&id), app.config.durable)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log_error", e.to_string()))?;
    let mut entry = Entry { state, log };
    persist(&mut entry, 0)?;
    let snapshot = entry.state.clone();
    app.sessions.lock().insert(id.clone(), Arc::new(Mutex::new(entry)));
    log::info!("session {id} started on scene {}", snapshot.scene.id);
    Ok((StatusCode::CREATED, Json(snapshot)))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionState>> {
    let entry = app.entry(&id)?;
    let state = entry.lock().state.clone();
    Ok(Json(state))
}

fn mutate(
    app: &AppState,
    id: &str,
    f: impl FnOnce(&mut SessionState) -> Result<(), SessionError>,
) -> ApiResult<Json<SessionState>> {
    let entry = app.entry(id)?;
    let mut guard = entry.lock();
    let from = guard.state.history.last().map_or(0, |e| e.seq + 1);
    f(&mut guard.state)?;
    persist(&mut guard, from)?;
    Ok(Json(guard.state.clone()))
}

async fn intervention(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<InterventionRequest>, JsonRejection>,
) -> ApiResult<Json<SessionState>> {
    let Json(req) = body?;
    mutate(&app, &id, |s| session::intervene(s, &req.text, &mut SystemClock))
}

async fn step(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionState>> {
    mutate(&app, &id, |s| session::step(s, &mut SystemClock))
}

async fn get_view(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<View>> {
    let entry = app.entry(&id)?;
    let v = view(&entry.lock().state);
    Ok(Json(v))
}

async fn get_log(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let entry = app.entry(&id)?;
    // holding the session lock keeps the file free of half-written events
    let _guard = entry.lock();
    let body = std::fs::read_to_string(app.log_path(&id))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log_error", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/intervention", post(intervention))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/view", get(get_view))
        .route("/logs/{id}", get(get_log))
        .fallback(fallback)
        .with_state(app)
}

/// Binds `addr` and returns the bound address with the server future.
pub async fn bind(
    addr: SocketAddr,
    config: ServerConfig,
) -> Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>), ServerError> {
    let app = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServerError::Bind { addr, source })?;
    let local = listener.local_addr()?;
    let fut = async move { axum::serve(listener, router(app)).await };
    Ok((local, fut))
}

pub async fn serve(addr: SocketAddr, config: ServerConfig) -> Result<(), ServerError> {
    let (local, fut) = bind(addr, config).await?;
    log::info!("listening on http://{local}");
    fut.await?;
    Ok(())
}
