//! The HTTP service. Each session sits behind its own async mutex, so
//! messages to one session run one at a time while sessions proceed in
//! parallel. A turn's log line is synced to disk before the reply is sent.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use dst_core::engine::EngineError;
use dst_core::llm::{generate_answer, LlmError, Retriever};
use dst_core::nlu::NluError;
use dst_core::tracker::{emit_result, ActionKind, DialogueState, DstResult, TrackerAction};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::OwnedMutexGuard;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::Runtime;
use crate::store::{valid_session_id, Event, Session, SessionStore, StoreError, TranscriptEntry, TurnEvent};

/// Reply when the model's output could not be used.
pub const REPEAT_REPLY: &str = "Sorry, something went wrong on my side. Could you say that again?";

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("{e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io(_) => ApiError::internal(e),
            StoreError::Corrupt { .. } | StoreError::Replay { .. } => {
                log::error!("{e}");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "corrupt_session", e.to_string())
            }
        }
    }
}

enum Slot {
    Unloaded,
    Live(Box<Session>),
    /// Dropped from the table; holders must look the session up again.
    Gone,
}

type SlotRef = Arc<tokio::sync::Mutex<Slot>>;

pub struct AppState {
    runtime: Runtime,
    store: SessionStore,
    seed: u64,
    ttl: Duration,
    sessions: Mutex<HashMap<String, SlotRef>>,
}

impl AppState {
    pub fn new(runtime: Runtime, store: SessionStore, seed: u64, ttl: Duration) -> Arc<Self> {
        Arc::new(AppState {
            runtime,
            store,
            seed,
            ttl,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn loaded_sessions(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    fn slot(&self, id: &str) -> SlotRef {
        self.sessions
            .lock()
            .expect("session table")
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(tokio::sync::Mutex::new(Slot::Unloaded)))
            .clone()
    }

    fn forget(&self, id: &str, slot: &SlotRef) {
        let mut t = self.sessions.lock().expect("session table");
        if t.get(id).is_some_and(|s| Arc::ptr_eq(s, slot)) {
            t.remove(id);
        }
    }

    /// Locks a session, loading it from disk on first use.
    async fn session(self: &Arc<Self>, id: &str) -> Result<OwnedMutexGuard<Slot>, ApiError> {
        if !valid_session_id(id) {
            return Err(ApiError::not_found(id));
        }
        loop {
            let slot = self.slot(id);
            let mut guard = slot.clone().lock_owned().await;
            match &*guard {
                Slot::Live(_) => return Ok(guard),
                Slot::Gone => continue,
                Slot::Unloaded => {
                    let (store, key) = (self.store.clone(), id.to_string());
                    let loaded = tokio::task::spawn_blocking(move || store.load(&key))
                        .await
                        .map_err(ApiError::internal)?;
                    match loaded {
                        Ok(Some(s)) => {
                            *guard = Slot::Live(Box::new(s));
                            return Ok(guard);
                        }
                        Ok(None) => {
                            *guard = Slot::Gone;
                            self.forget(id, &slot);
                            return Err(ApiError::not_found(id));
                        }
                        Err(e) => {
                            *guard = Slot::Gone;
                            self.forget(id, &slot);
                            return Err(e.into());
                        }
                    }
                }
            }
        }
    }

    /// Unloads sessions idle for longer than the TTL. Their logs stay on disk.
    pub fn evict_idle(&self) -> usize {
        let cutoff = Utc::now() - chrono::Duration::from_std(self.ttl).unwrap_or(chrono::Duration::MAX);
        let mut table = self.sessions.lock().expect("session table");
        let before = table.len();
        table.retain(|_, slot| match slot.clone().try_lock_owned() {
            Ok(mut g) => {
                let idle = match &*g {
                    Slot::Live(s) => s.last_active < cutoff,
                    Slot::Unloaded | Slot::Gone => true,
                };
                if idle {
                    *g = Slot::Gone;
                }
                !idle
            }
            Err(_) => true,
        });
        before - table.len()
    }
}

fn live(g: &mut Slot) -> &mut Session {
    match g {
        Slot::Live(s) => s,
        _ => unreachable!("session() only returns live slots"),
    }
}

#[derive(Debug, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageResponse {
    pub reply: String,
    pub action: String,
    pub verdict: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<DstResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    #[serde(flatten)]
    pub state: DialogueState,
    /// Mandatory slots of the active intent still unfilled.
    pub missing: Vec<String>,
    pub result: Option<DstResult>,
    pub created_at: chrono::DateTime<Utc>,
    pub last_active: chrono::DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptView {
    pub session_id: String,
    pub transcript: Vec<TranscriptEntry>,
}

async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn create_session(State(app): State<Arc<AppState>>) -> Result<(StatusCode, Json<Value>), ApiError> {
    let (store, seed) = (app.store.clone(), app.seed);
    let s = tokio::task::spawn_blocking(move || store.create(seed))
        .await
        .map_err(ApiError::internal)??;
    let id = s.id.clone();
    app.sessions
        .lock()
        .expect("session table")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(Slot::Live(Box::new(s)))));
    log::info!("session {id} created");
    Ok((StatusCode::CREATED, Json(json!({"session_id": id}))))
}

/// Reply text for a finished turn: an answer from the retrieval rows when
/// the request is complete, otherwise the tracker's question.
pub fn reply_for(retriever: &dyn Retriever, action: &TrackerAction) -> String {
    match (&action.kind, &action.result) {
        (ActionKind::Complete, Some(r)) => match generate_answer(r, retriever, None) {
            Ok(a) => a.text,
            Err(e) => {
                log::warn!("answer generation failed: {e}");
                action.reply().to_string()
            }
        },
        _ => action.reply().to_string(),
    }
}

fn engine_error(e: EngineError) -> Result<&'static str, ApiError> {
    match e {
        EngineError::EmptyUtterance => Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_text", "text is empty")),
        EngineError::Llm(LlmError::Unparseable(_) | LlmError::MissingKey(_) | LlmError::Invalid(_)) => {
            log::warn!("unusable model output: {e}");
            Ok("model_output_rejected")
        }
        EngineError::Llm(LlmError::Http(h)) | EngineError::Nlu(NluError::Unavailable(h)) => {
            log::error!("upstream failure: {h}");
            Err(ApiError::new(StatusCode::BAD_GATEWAY, "upstream_unavailable", h.to_string()))
        }
        EngineError::Nlu(NluError::MalformedResponse(m)) => {
            Err(ApiError::new(StatusCode::BAD_GATEWAY, "upstream_malformed", m))
        }
        other => Err(ApiError::internal(other)),
    }
}

fn run_turn(app: &AppState, s: &mut Session, text: String) -> Result<MessageResponse, ApiError> {
    let mut conv = s.conversation.clone();
    match app.runtime.engine.step(&mut conv, &text) {
        Ok(out) => {
            let reply = reply_for(app.runtime.retriever.as_ref(), &out.action);
            s.append(&Event::Turn(TurnEvent {
                at: Utc::now(),
                turn_no: conv.state.turn_no,
                user: text,
                reply: reply.clone(),
                action: out.action.kind,
                verdict: out.verdict.label,
                scores: out.nlu.scores.clone(),
                schedule_line: out.schedule_line.clone(),
                records: out.records.clone(),
            }))?;
            s.conversation = conv;
            Ok(MessageResponse {
                reply,
                action: out.action.kind.as_str().to_string(),
                verdict: out.verdict.label.as_str().to_string(),
                result: out.result,
            })
        }
        Err(e) => {
            let code = engine_error(e)?;
            s.append(&Event::Unprocessed {
                at: Utc::now(),
                user: text,
                reply: REPEAT_REPLY.into(),
                code: code.into(),
            })?;
            Ok(MessageResponse {
                reply: REPEAT_REPLY.into(),
                action: "repeat".into(),
                verdict: "none".into(),
                result: None,
            })
        }
    }
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<MessageRequest>, JsonRejection>,
) -> Result<Json<MessageResponse>, ApiError> {
    let Json(req) = body.map_err(|r| ApiError::new(r.status(), "invalid_body", r.body_text()))?;
    if req.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_text", "text is empty"));
    }
    let mut guard = app.session(&id).await?;
    let app2 = app.clone();
    let (mut guard, r) = tokio::task::spawn_blocking(move || {
        let r = run_turn(&app2, live(&mut guard), req.text);
        (guard, r)
    })
    .await
    .map_err(ApiError::internal)?;
    if matches!(&r, Err(e) if e.code == "internal_error") {
        // the log may hold a partial line; reload from disk on next use
        *guard = Slot::Unloaded;
    }
    r.map(Json)
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<StateView>, ApiError> {
    let mut guard = app.session(&id).await?;
    let s = live(&mut guard);
    let ontology = &app.runtime.engine.ontology;
    let state = s.state().clone();
    let (missing, result) = match &state.active_intent {
        Some(intent) => {
            let schema = ontology.intent(intent).map_err(ApiError::internal)?;
            let missing = schema
                .missing_mandatory(state.fills.keys())
                .map_err(ApiError::internal)?
                .into_iter()
                .map(String::from)
                .collect();
            (missing, Some(emit_result(&state, ontology).map_err(ApiError::internal)?))
        }
        None => (Vec::new(), None),
    };
    Ok(Json(StateView {
        state,
        missing,
        result,
        created_at: s.created_at,
        last_active: s.last_active,
    }))
}

async fn get_transcript(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<TranscriptView>, ApiError> {
    let mut guard = app.session(&id).await?;
    let s = live(&mut guard);
    Ok(Json(TranscriptView {
        session_id: s.id.clone(),
        transcript: s.transcript.clone(),
    }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this route")
}

pub fn cors(origin: Option<&str>) -> CorsLayer {
    let allow = match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
}

pub fn router(app: Arc<AppState>, cors_origin: Option<&str>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/sessions/{id}/state", get(get_state))
        .route("/v1/sessions/{id}/transcript", get(get_transcript))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(cors(cors_origin))
        .with_state(app)
}

/// Runs the idle sweep every `every` until the process ends.
pub fn spawn_eviction(app: Arc<AppState>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        tick.tick().await;
        loop {
            tick.tick().await;
            let n = app.evict_idle();
            if n > 0 {
                log::info!("evicted {n} idle sessions");
            }
        }
    })
}
