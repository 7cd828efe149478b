//! Recognition server.
//!
//! Requests are accepted on the async runtime and handed to a bounded
//! [`queue::WorkQueue`] whose worker threads do all decoding, embedding and
//! matching, so status endpoints stay responsive while embeddings run.
//! When the queue is full, requests fail fast with a retryable 503.
//!
//! | endpoint | |
//! |---|---|
//! | `POST /register` | `{user_id, image_b64}` → `{status, embedding}` |
//! | `POST /recognize` | `{request_id, frames_b64}` → `{request_id, matches}` |
//! | `POST /postUid` | form `uid1..3`, `value1..3` → presence |
//! | `GET /getUinfo` | display slots |
//! | `GET /events` | display events (server-sent events) |
//! | `GET /healthz` | `{status, queue_depth}` |
//! | `GET /metrics` | request counters |

pub mod activity;
pub mod config;
pub mod engine;
pub mod http;
pub mod presence_actor;
pub mod queue;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::http::StatusCode;
use siamface::gallery::Gallery;
use siamface::presence::{MemoryDirectory, PresenceState, UserDirectory};
use siamface::SiameseNetwork;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

pub use config::ServiceConfig;
pub use engine::{Candidate, CandidateList, Detector, Embedder, Engine, FaceBox, PassThroughDetector};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("undecodable image: {0}")]
    Decode(String),
    #[error("no face detected")]
    NoFace,
    #[error("embedding queue is full")]
    Overloaded,
    #[error("configuration: {0}")]
    Config(String),
    #[error("startup: {0}")]
    Startup(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidArgument(_) => "invalid_argument",
            Self::Decode(_) => "decode",
            Self::NoFace => "no_face",
            Self::Overloaded => "overloaded",
            Self::Config(_) => "config",
            Self::Startup(_) => "startup",
            Self::Internal(_) => "internal",
        }
    }

    pub fn retryable(&self) -> bool {
        matches!(self, Self::Overloaded)
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::InvalidArgument(_) | Self::Decode(_) => StatusCode::BAD_REQUEST,
            Self::NoFace => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Overloaded => StatusCode::SERVICE_UNAVAILABLE,
            Self::Config(_) | Self::Startup(_) | Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Everything the server needs besides its configuration.
pub struct Components {
    pub embedder: Box<dyn Embedder>,
    pub detector: Box<dyn Detector>,
    pub gallery: Gallery,
    pub directory: Box<dyn UserDirectory>,
}

impl Components {
    /// Loads the checkpoint, gallery and user directory named in `config`.
    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let ckpt = config
            .checkpoint_path
            .as_ref()
            .ok_or_else(|| ServiceError::Config("checkpoint path is required".into()))?;
        let net = SiameseNetwork::load(ckpt).map_err(|e| ServiceError::Startup(e.to_string()))?;
        let gallery = match &config.gallery_path {
            Some(p) => Gallery::open(p).map_err(|e| ServiceError::Startup(e.to_string()))?,
            None => Gallery::new(),
        };
        let directory = match &config.users_path {
            Some(p) => MemoryDirectory::load(p).map_err(|e| ServiceError::Startup(e.to_string()))?,
            None => MemoryDirectory::new(),
        };
        Ok(Self {
            embedder: Box::new(engine::NetworkEmbedder::new(net)),
            detector: Box::new(PassThroughDetector),
            gallery,
            directory: Box::new(directory),
        })
    }
}

/// A server running on the current tokio runtime.
pub struct RunningService {
    pub addr: SocketAddr,
    pub state: Arc<http::AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl RunningService {
    pub async fn stop(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await.unwrap_or(Ok(()))
    }

    /// Runs until the server task ends.
    pub async fn wait(self) -> std::io::Result<()> {
        self.task.await.unwrap_or(Ok(()))
    }
}

/// Binds `config.host:config.port` (port 0 picks a free port) and serves.
pub async fn start(config: &ServiceConfig, parts: Components) -> Result<RunningService, ServiceError> {
    config.validate()?;
    let presence = PresenceState::new(config.presence.clone(), parts.directory)
        .map_err(|e| ServiceError::Config(e.to_string()))?;
    let activity = match &config.activity_log {
        Some(p) => Some(Arc::new(
            activity::ActivityLog::open(p).map_err(|e| ServiceError::Startup(format!("{}: {e}", p.display())))?,
        )),
        None => None,
    };
    let (closing_tx, closing) = tokio::sync::watch::channel(false);
    let state = Arc::new(http::AppState {
        engine: Arc::new(Engine::new(parts.embedder, parts.detector, parts.gallery, config.top_n)),
        queue: queue::WorkQueue::new(config.queue_capacity, config.workers),
        presence: presence_actor::spawn(presence, config.tick_interval),
        activity,
        metrics: http::Metrics::default(),
        max_frames: config.max_frames,
        closing,
    });
    let listener = TcpListener::bind((config.host.as_str(), config.port))
        .await
        .map_err(|e| ServiceError::Startup(format!("bind {}:{}: {e}", config.host, config.port)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| ServiceError::Startup(e.to_string()))?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = http::router(Arc::clone(&state));
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = rx.await;
                let _ = closing_tx.send(true);
            })
            .await
    });
    tracing::info!(%addr, "recognition service listening");
    Ok(RunningService {
        addr,
        state,
        shutdown: Some(tx),
        task,
    })
}

/// A server on its own runtime thread, for synchronous callers.
pub struct BackgroundService {
    pub addr: SocketAddr,
    stop: Option<std::sync::mpsc::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundService {
    pub fn spawn(config: ServiceConfig, parts: Components) -> Result<Self, ServiceError> {
        let (ready_tx, ready_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = std::sync::mpsc::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
                Ok(rt) => rt,
                Err(e) => {
                    let _ = ready_tx.send(Err(ServiceError::Startup(e.to_string())));
                    return;
                }
            };
            rt.block_on(async move {
                match start(&config, parts).await {
                    Ok(svc) => {
                        let _ = ready_tx.send(Ok(svc.addr));
                        let _ = tokio::task::spawn_blocking(move || stop_rx.recv()).await;
                        let _ = svc.stop().await;
                    }
                    Err(e) => {
                        let _ = ready_tx.send(Err(e));
                    }
                }
            });
        });
        let addr = ready_rx
            .recv()
            .map_err(|_| ServiceError::Startup("service thread exited".into()))??;
        Ok(Self {
            addr,
            stop: Some(stop_tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for BackgroundService {
    fn drop(&mut self) {
        self.stop.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
