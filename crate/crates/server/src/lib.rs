//! Session service for operator clients.
//!
//! | method | path                    | body                   | reply                         |
//! |--------|-------------------------|------------------------|-------------------------------|
//! | POST   | `/sessions`             | `{case, seed, role?}`  | 201 `{id, obs, grid, ..}`     |
//! | POST   | `/sessions/{id}/step`   | `{di, dj}`             | 200 step result               |
//! | GET    | `/sessions/{id}/log`    |                        | 200 episode log line          |
//! | GET    | `/sessions/{id}/stream` | WebSocket upgrade      | step results as text frames   |
//!
//! Errors are `{"error":{"code":..,"message":..}}` with 404 for unknown
//! sessions or cases and 409 for steps the episode does not allow.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bioptx::env::EnvError;
use bioptx::harness::{CreateSession, SessionError, SessionManager, StepRequest};
use serde_json::json;
use tokio::sync::broadcast;
use tracing::{debug, info};

/// Step results buffered per stream subscriber before it starts lagging.
const STREAM_BUFFER: usize = 64;

#[derive(Clone)]
pub struct AppState {
    manager: Arc<SessionManager>,
    streams: Arc<Mutex<HashMap<String, broadcast::Sender<String>>>>,
}

impl AppState {
    pub fn new(manager: SessionManager) -> Self {
        Self {
            manager: Arc::new(manager),
            streams: Arc::default(),
        }
    }

    pub fn manager(&self) -> &SessionManager {
        &self.manager
    }

    fn channel(&self, id: &str) -> broadcast::Sender<String> {
        self.streams
            .lock()
            .expect("stream map lock")
            .entry(id.to_string())
            .or_insert_with(|| broadcast::channel(STREAM_BUFFER).0)
            .clone()
    }
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let msg = e.to_string();
        match e {
            SessionError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "unknown_session", msg),
            SessionError::UnknownCase(_) => Self::new(StatusCode::NOT_FOUND, "unknown_case", msg),
            SessionError::Conflict(_) | SessionError::Env(EnvError::EpisodeFinished) => {
                Self::new(StatusCode::CONFLICT, "illegal_step", msg)
            }
            SessionError::Env(_) | SessionError::Persist(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg)
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

async fn create(
    State(st): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    let created = st.manager.create(&req)?;
    info!(id = %created.id, case = %created.case, seed = created.seed, "session created");
    Ok((StatusCode::CREATED, Json(created)))
}

async fn step(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<StepRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    let m = st.manager.clone();
    let sid = id.clone();
    let payload = tokio::task::spawn_blocking(move || m.step(&sid, req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let text = serde_json::to_string(&payload).expect("step payload serializes");
    // no subscribers is fine
    let _ = st.channel(&id).send(text);
    Ok(Json(payload))
}

async fn log(State(st): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let (line, _) = st.manager.log(&id)?;
    Ok(Json(line))
}

async fn stream(
    State(st): State<AppState>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    st.manager.log(&id)?;
    let rx = st.channel(&id).subscribe();
    Ok(ws.on_upgrade(move |socket| forward(socket, rx, id)))
}

async fn forward(mut socket: WebSocket, mut rx: broadcast::Receiver<String>, id: String) {
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(text) => {
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    let note = json!({"error": {"code": "lagged", "message": format!("{n} step results dropped")}});
                    if socket.send(Message::Text(note.to_string().into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    debug!(%id, "stream closed");
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/log", get(log))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
