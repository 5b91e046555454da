//! HTTP routes.
//!
//! | method | path | body | success |
//! |---|---|---|---|
//! | POST | `/sessions` | optional [`SessionOverrides`] | 201 [`Session`] |
//! | POST | `/sessions/{id}/incidents` | [`SubmitIncident`] | 202 [`SubmitAccepted`] |
//! | GET | `/sessions/{id}/events` | `?after=<seq>&follow=<bool>` or `Last-Event-ID` | event stream |
//! | POST | `/sessions/{id}/follow-up` | [`FollowUp`] | 200 [`FollowUpAnswer`] |
//! | GET | `/sessions/{id}` | | 200 [`Session`] |
//! | GET | `/healthz` | | 200 `{"status":"ok"}` |
//!
//! Errors carry a [`Problem`] body.

use std::collections::HashMap;
use std::convert::Infallible;
use std::future::Future;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use arise_core::domain::{validate_incident, DomainError};
use arise_core::orchestrator::{CallPurpose, PanelConfig, PanelEngine, PanelEvent};
use arise_core::personas::{build_follow_up_prompt, builtin_profiles, AgentRole};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use futures::stream::{self, BoxStream, StreamExt};
use serde::Deserialize;
use tokio::sync::watch;
use tokio_stream::wrappers::BroadcastStream;

use crate::model::{
    AnalysisEvent, Author, EventKind, FollowUp, FollowUpAnswer, Message, Problem, Session, SessionOverrides,
    SubmitAccepted, SubmitIncident,
};
use crate::store::{load_all, SessionHandle, StoreError};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub problem: Problem,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            problem: Problem {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown-session", format!("no session {id}"))
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        tracing::error!(error = %e, "session store failure");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.problem)).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes, code: &str) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string()))
}

struct Shared {
    engine: PanelEngine,
    root: PathBuf,
    defaults: PanelConfig,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    /// In-flight analysis id -> owning session.
    inflight: std::sync::Mutex<HashMap<String, Arc<SessionHandle>>>,
    shutdown: watch::Sender<bool>,
}

impl Shared {
    fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    fn is_shutting_down(&self) -> bool {
        *self.shutdown.borrow()
    }
}

/// The session service: shared state plus its router.
#[derive(Clone)]
pub struct Service {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("root", &self.shared.root).finish()
    }
}

impl Service {
    /// Opens (or creates) the state directory and restores its sessions.
    /// Analyses left without a terminal event by an earlier crash are closed
    /// with an `error` event.
    pub fn open(state_dir: &FsPath, engine: PanelEngine, defaults: PanelConfig) -> Result<Self, StoreError> {
        let root = state_dir.join("sessions");
        let mut sessions = HashMap::new();
        for handle in load_all(&root)? {
            for analysis in handle.open_analyses() {
                handle.fail(&analysis, "interrupted", "the service stopped before this analysis finished")?;
            }
            sessions.insert(handle.id().to_string(), handle);
        }
        tracing::info!(sessions = sessions.len(), root = %root.display(), "session store opened");
        let (shutdown, _) = watch::channel(false);
        Ok(Self {
            shared: Arc::new(Shared {
                engine,
                root,
                defaults,
                sessions: RwLock::new(sessions),
                inflight: std::sync::Mutex::new(HashMap::new()),
                shutdown,
            }),
        })
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/healthz", get(healthz))
            .route("/sessions", post(create_session))
            .route("/sessions/:id", get(get_session))
            .route("/sessions/:id/incidents", post(submit_incident))
            .route("/sessions/:id/events", get(events))
            .route("/sessions/:id/follow-up", post(follow_up))
            .with_state(self.shared.clone())
    }

    /// Stops accepting analyses, ends in-flight ones with an `error` event,
    /// closes event streams and flushes every session.
    pub fn begin_shutdown(&self) {
        if self.shared.shutdown.send_replace(true) {
            return;
        }
        let inflight: Vec<(String, Arc<SessionHandle>)> = self
            .shared
            .inflight
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .drain()
            .collect();
        for (analysis, handle) in inflight {
            if let Err(e) = handle.fail(&analysis, "shutdown", "the service is shutting down") {
                tracing::error!(error = %e, "could not record shutdown event");
            }
        }
        self.flush();
    }

    pub fn flush(&self) {
        let sessions = self.shared.sessions.read().unwrap_or_else(|p| p.into_inner());
        for handle in sessions.values() {
            if let Err(e) = handle.flush() {
                tracing::error!(session = handle.id(), error = %e, "flush failed");
            }
        }
    }

    /// Serves until `signal` resolves, then shuts down gracefully.
    pub async fn serve(
        self,
        listener: tokio::net::TcpListener,
        signal: impl Future<Output = ()> + Send + 'static,
    ) -> std::io::Result<()> {
        let me = self.clone();
        let result = axum::serve(listener, self.router())
            .with_graceful_shutdown(async move {
                signal.await;
                tracing::info!("shutdown requested");
                me.begin_shutdown();
            })
            .await;
        self.flush();
        result
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(State(s): State<Arc<Shared>>, body: Bytes) -> Result<(StatusCode, Json<Session>), ApiError> {
    let overrides: SessionOverrides = if body.iter().all(u8::is_ascii_whitespace) {
        SessionOverrides::default()
    } else {
        parse_body(&body, "invalid-config")?
    };
    let config = overrides.apply(s.defaults.clone());
    config
        .validate()
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid-config", e.to_string()))?;
    let root = s.root.clone();
    let handle = tokio::task::spawn_blocking(move || SessionHandle::create(&root, config))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let session = handle.session();
    s.sessions
        .write()
        .unwrap_or_else(|p| p.into_inner())
        .insert(handle.id().to_string(), handle);
    Ok((StatusCode::CREATED, Json(session)))
}

async fn get_session(State(s): State<Arc<Shared>>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    Ok(Json(s.session(&id)?.session()))
}

fn encode(event: PanelEvent) -> (EventKind, serde_json::Value) {
    match event {
        PanelEvent::AgentStarted { agent_id, role } => {
            (EventKind::AgentStarted, serde_json::json!({ "agent_id": agent_id, "role": role }))
        }
        PanelEvent::AgentVerdict(v) => (EventKind::AgentVerdict, serde_json::json!({ "verdict": v })),
        PanelEvent::ManagerDecision { label, rationale } => (
            EventKind::ManagerDecision,
            serde_json::json!({ "label": label, "rationale": rationale }),
        ),
        PanelEvent::AdvisoryNote { agent_id, note } => {
            (EventKind::AdvisoryNote, serde_json::json!({ "agent_id": agent_id, "note": note }))
        }
    }
}

async fn submit_incident(
    State(s): State<Arc<Shared>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<SubmitAccepted>), ApiError> {
    let handle = s.session(&id)?;
    let req: SubmitIncident = parse_body(&body, "invalid-request")?;
    let incident = validate_incident(&req.text, req.context.as_deref()).map_err(|e| match e {
        DomainError::EmptyIncident => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty-incident", e.to_string()),
        other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid-incident", other.to_string()),
    })?;
    if s.is_shutting_down() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutting-down", "the service is shutting down"));
    }
    let analysis_id = crate::store::new_session_id();
    handle.begin_analysis(&analysis_id, &incident.text)?;
    s.inflight
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .insert(analysis_id.clone(), handle.clone());

    let config = handle.config();
    let (s2, h2, a2) = (s.clone(), handle.clone(), analysis_id.clone());
    let job = tokio::task::spawn_blocking(move || {
        let observer = |event: PanelEvent| {
            let (kind, payload) = encode(event);
            if let Err(e) = h2.emit(&a2, kind, payload) {
                tracing::error!(error = %e, "could not record event");
            }
        };
        let outcome = s2.engine.analyze_incident(&incident, &config, &observer);
        let recorded = match outcome {
            Ok(o) => h2.complete(&a2, o.report).map(|_| ()),
            Err(e) => h2.fail(&a2, "analysis-failed", &e.to_string()).map(|_| ()),
        };
        if let Err(e) = recorded {
            tracing::error!(error = %e, "could not record analysis outcome");
        }
    });
    let (s3, h3, a3) = (s.clone(), handle, analysis_id.clone());
    tokio::spawn(async move {
        if let Err(e) = job.await {
            let _ = h3.fail(&a3, "analysis-failed", &format!("analysis task failed: {e}"));
        }
        s3.inflight.lock().unwrap_or_else(|p| p.into_inner()).remove(&a3);
    });
    Ok((StatusCode::ACCEPTED, Json(SubmitAccepted { analysis_id })))
}


#[derive(Debug, Deserialize)]
struct EventsQuery {
    after: Option<u64>,
    follow: Option<bool>,
}

async fn events(
    State(s): State<Arc<Shared>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<BoxStream<'static, Result<Event, Infallible>>>, ApiError> {
    let handle = s.session(&id)?;
    let after = match q.after {
        Some(a) => a,
        None => headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0),
    };
    let (history, rx) = handle.subscribe(after);
    let last = history.last().map_or(after, |e| e.seq);
    let replay = stream::iter(history);
    let follow = q.follow.unwrap_or(true) && !s.is_shutting_down();
    let body: BoxStream<'static, AnalysisEvent> = if follow {
        let mut stop = s.shutdown.subscribe();
        let live = BroadcastStream::new(rx)
            // A lagging client is cut off and reconnects with Last-Event-ID.
            .take_while(|r| futures::future::ready(r.is_ok()))
            .filter_map(move |r| futures::future::ready(r.ok().filter(|e| e.seq > last)))
            .take_until(async move {
                let _ = stop.wait_for(|v| *v).await;
            });
        replay.chain(live).boxed()
    } else {
        replay.boxed()
    };
    let sse = body
        .map(|e| {
            let data = serde_json::to_string(&e).expect("events serialize");
            Ok(Event::default().id(e.seq.to_string()).event(e.kind.as_str()).data(data))
        })
        .boxed();
    Ok(Sse::new(sse).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

async fn follow_up(
    State(s): State<Arc<Shared>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<FollowUpAnswer>, ApiError> {
    let handle = s.session(&id)?;
    let req: FollowUp = parse_body(&body, "invalid-request")?;
    let question = req.question.trim().to_string();
    if question.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty-question", "question is empty"));
    }
    let Some((incident_text, report)) = handle.latest_report() else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "no-report-yet",
            "ask follow-up questions after the first report is ready",
        ));
    };
    let config = handle.config();
    let manager = config
        .profiles
        .iter()
        .find(|p| p.role == AgentRole::Manager)
        .cloned()
        .or_else(|| builtin_profiles().into_iter().find(|p| p.role == AgentRole::Manager))
        .expect("built-in profiles include a manager");
    let bundle = build_follow_up_prompt(&manager, &incident_text, &report, &question)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let s2 = s.clone();
    let agent = manager.agent_id.clone();
    let answer = tokio::task::spawn_blocking(move || s2.engine.call(&agent, CallPurpose::FollowUp, bundle.messages()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, "upstream-failure", e.to_string()))?
        .0;
    let now = Utc::now();
    let answer = Message {
        author: Author::Agent(manager.agent_id),
        content: answer.trim().to_string(),
        timestamp: now,
        analysis_id: None,
    };
    handle.append_messages(vec![
        Message {
            author: Author::Teacher,
            content: question,
            timestamp: now,
            analysis_id: None,
        },
        answer.clone(),
    ])?;
    Ok(Json(FollowUpAnswer { answer }))
}
