use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Form, State};
use axum::http::header;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use siamface::Embedding;
use tokio::sync::broadcast::error::RecvError;

use crate::activity::ActivityLog;
use crate::engine::{CandidateList, Engine, FrameError};
use crate::presence_actor::PresenceHandle;
use crate::queue::WorkQueue;
use crate::ServiceError;

/// Request counters. Once the service is idle,
/// `received == completed + failed + overloaded`.
#[derive(Debug, Default)]
pub struct Metrics {
    received: AtomicU64,
    completed: AtomicU64,
    failed: AtomicU64,
    overloaded: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub received: u64,
    pub completed: u64,
    pub failed: u64,
    pub overloaded: u64,
}

impl Metrics {
    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            received: self.received.load(Ordering::SeqCst),
            completed: self.completed.load(Ordering::SeqCst),
            failed: self.failed.load(Ordering::SeqCst),
            overloaded: self.overloaded.load(Ordering::SeqCst),
        }
    }

    fn finish<T>(&self, r: &Result<T, ServiceError>) {
        let counter = match r {
            Ok(_) => &self.completed,
            Err(ServiceError::Overloaded) => &self.overloaded,
            Err(_) => &self.failed,
        };
        counter.fetch_add(1, Ordering::SeqCst);
    }
}

pub struct AppState {
    pub engine: Arc<Engine>,
    pub queue: WorkQueue,
    pub presence: PresenceHandle,
    pub activity: Option<Arc<ActivityLog>>,
    pub metrics: Metrics,
    pub max_frames: usize,
    /// Becomes true when shutdown starts; open event streams end then.
    pub closing: tokio::sync::watch::Receiver<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub user_id: String,
    pub image_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub status: String,
    pub embedding: Embedding,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecognizeRequest {
    pub request_id: String,
    pub frames_b64: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub queue_depth: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    pub retryable: bool,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.kind().to_string(),
            message: self.to_string(),
            retryable: self.retryable(),
        };
        let mut resp = (self.status(), Json(body)).into_response();
        if self.retryable() {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, header::HeaderValue::from_static("1"));
        }
        resp
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/register", post(register))
        .route("/recognize", post(recognize))
        .route("/postUid", post(post_uid))
        .route("/getUinfo", get(get_uinfo))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .route("/events", get(events))
        .with_state(state)
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::InvalidArgument(format!("bad request body: {e}")))
}

fn b64(s: &str) -> Result<Vec<u8>, String> {
    base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| format!("invalid base64: {e}"))
}

async fn register(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<RegisterResponse>, ServiceError> {
    st.metrics.received.fetch_add(1, Ordering::SeqCst);
    let r = register_inner(&st, &body).await;
    st.metrics.finish(&r);
    r.map(Json)
}

async fn register_inner(st: &AppState, body: &[u8]) -> Result<RegisterResponse, ServiceError> {
    let req: RegisterRequest = parse_json(body)?;
    if req.user_id.is_empty() {
        return Err(ServiceError::InvalidArgument("user_id must not be empty".into()));
    }
    let image = b64(&req.image_b64).map_err(ServiceError::Decode)?;
    let engine = Arc::clone(&st.engine);
    let ticket = st
        .queue
        .submit(move || engine.register(&req.user_id, &image))
        .map_err(|_| ServiceError::Overloaded)?;
    let embedding = ticket.wait().await.map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(RegisterResponse {
        status: "ok".into(),
        embedding,
    })
}

async fn recognize(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<CandidateList>, ServiceError> {
    st.metrics.received.fetch_add(1, Ordering::SeqCst);
    let r = recognize_inner(&st, &body).await;
    st.metrics.finish(&r);
    let list = r?;
    if let Some(top) = list.matches.first() {
        st.presence.offer(&top.user_id, top.score);
    }
    Ok(Json(list))
}

async fn recognize_inner(st: &AppState, body: &[u8]) -> Result<CandidateList, ServiceError> {
    let req: RecognizeRequest = parse_json(body)?;
    if req.request_id.is_empty() {
        return Err(ServiceError::InvalidArgument("request_id must not be empty".into()));
    }
    if req.frames_b64.is_empty() || req.frames_b64.len() > st.max_frames {
        return Err(ServiceError::InvalidArgument(format!(
            "need 1 to {} frames, got {}",
            st.max_frames,
            req.frames_b64.len()
        )));
    }
    let mut frames = Vec::new();
    let mut origin = Vec::new();
    let mut b64_errors = Vec::new();
    for (i, f) in req.frames_b64.iter().enumerate() {
        match b64(f) {
            Ok(bytes) => {
                frames.push(bytes);
                origin.push(i);
            }
            Err(error) => b64_errors.push(FrameError { frame: i, error }),
        }
    }
    let engine = Arc::clone(&st.engine);
    let activity = st.activity.clone();
    let request_id = req.request_id;
    let ticket = st
        .queue
        .submit(move || {
            let mut list = engine.recognize(&request_id, &frames)?;
            for e in &mut list.frame_errors {
                e.frame = origin[e.frame];
            }
            list.frame_errors.extend(b64_errors);
            list.frame_errors.sort_by_key(|e| e.frame);
            if let Some(log) = activity {
                if let Err(e) = log.record(&list.request_id, &list.matches) {
                    tracing::warn!("activity log write failed: {e}");
                }
            }
            Ok(list)
        })
        .map_err(|_| ServiceError::Overloaded)?;
    ticket.wait().await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

/// Form-encoded `uid1..3`, `value1..3`. Only the first candidate drives
/// presence; the others are accepted and logged.
async fn post_uid(State(st): State<Arc<AppState>>, Form(form): Form<HashMap<String, String>>) -> Result<String, ServiceError> {
    let uid = form.get("uid1").filter(|u| !u.is_empty()).ok_or_else(|| {
        ServiceError::InvalidArgument("uid1 is required".into())
    })?;
    let value: f64 = form
        .get("value1")
        .and_then(|v| v.trim().parse().ok())
        .filter(|v: &f64| v.is_finite())
        .ok_or_else(|| ServiceError::InvalidArgument("value1 must be a finite number".into()))?;
    tracing::info!(uid1 = %uid, value1 = value, uid2 = ?form.get("uid2"), uid3 = ?form.get("uid3"), "postUid");
    st.presence.offer(uid, value);
    let echo = serde_json::to_string(&form).unwrap_or_default();
    Ok(format!("Got a POST request:: {echo}"))
}

async fn get_uinfo(State(st): State<Arc<AppState>>) -> impl IntoResponse {
    Json(st.presence.snapshot())
}

async fn healthz(State(st): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        queue_depth: st.queue.depth(),
    })
}

async fn metrics(State(st): State<Arc<AppState>>) -> Json<MetricsSnapshot> {
    Json(st.metrics.snapshot())
}

async fn events(State(st): State<Arc<AppState>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = st.presence.subscribe();
    let mut closing = st.closing.clone();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let data = serde_json::to_string(&ev).unwrap_or_default();
                    return Some((Ok(Event::default().data(data)), rx));
                }
                Err(RecvError::Lagged(n)) => tracing::warn!("event stream lagged by {n}"),
                Err(RecvError::Closed) => return None,
            }
        }
    })
    .take_until(async move {
        let _ = closing.wait_for(|c| *c).await;
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
