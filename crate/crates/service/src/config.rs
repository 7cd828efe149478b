use std::path::{Path, PathBuf};
use std::time::Duration;

use siamface::presence::PresenceConfig;

use crate::ServiceError;

/// Service settings, read from `key = value` lines (`#` comments).
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub checkpoint_path: Option<PathBuf>,
    pub gallery_path: Option<PathBuf>,
    pub users_path: Option<PathBuf>,
    pub activity_log: Option<PathBuf>,
    pub top_n: usize,
    pub max_frames: usize,
    pub queue_capacity: usize,
    pub workers: usize,
    pub presence: PresenceConfig,
    /// How often the presence clock advances without new candidates.
    pub tick_interval: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint_path: None,
            gallery_path: None,
            users_path: None,
            activity_log: None,
            top_n: 3,
            max_frames: 3,
            queue_capacity: 64,
            workers: 1,
            presence: PresenceConfig::default(),
            tick_interval: Duration::from_millis(100),
        }
    }
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| ServiceError::Config(format!("line {}: {reason}", i + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
            fn num<T: std::str::FromStr>(v: &str, key: &str, line: usize) -> Result<T, ServiceError> {
                v.parse()
                    .map_err(|_| ServiceError::Config(format!("line {line}: bad value for {key}: {v:?}")))
            }
            let n = i + 1;
            match key {
                "host" => cfg.host = value.to_string(),
                "port" => cfg.port = num(value, key, n)?,
                "checkpoint" => cfg.checkpoint_path = Some(value.into()),
                "gallery" => cfg.gallery_path = Some(value.into()),
                "users" => cfg.users_path = Some(value.into()),
                "activity_log" => cfg.activity_log = Some(value.into()),
                "top_n" => cfg.top_n = num(value, key, n)?,
                "max_frames" => cfg.max_frames = num(value, key, n)?,
                "queue_capacity" => cfg.queue_capacity = num(value, key, n)?,
                "workers" => cfg.workers = num(value, key, n)?,
                "yz1" | "threshold" => cfg.presence.threshold = num(value, key, n)?,
                "slots" => cfg.presence.slot_count = num(value, key, n)?,
                "block_ms" => cfg.presence.block_ms = num(value, key, n)?,
                "display_ms" => cfg.presence.display_ms = num(value, key, n)?,
                "tick_ms" => cfg.tick_interval = Duration::from_millis(num(value, key, n)?),
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.top_n == 0 || self.max_frames == 0 || self.queue_capacity == 0 || self.workers == 0 {
            return Err(ServiceError::Config(
                "top_n, max_frames, queue_capacity and workers must all be at least 1".into(),
            ));
        }
        if self.tick_interval.is_zero() {
            return Err(ServiceError::Config("tick_ms must be positive".into()));
        }
        self.presence
            .validate()
            .map_err(|e| ServiceError::Config(e.to_string()))
    }
}
