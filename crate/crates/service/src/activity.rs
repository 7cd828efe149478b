use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::engine::Candidate;

#[derive(Serialize)]
struct Line<'a> {
    time: u128,
    request_id: &'a str,
    matches: &'a [Candidate],
}

/// Append-only JSON-lines log of completed recognitions.
pub struct ActivityLog {
    out: Mutex<BufWriter<File>>,
}

impl ActivityLog {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(f)),
        })
    }

    pub fn record(&self, request_id: &str, matches: &[Candidate]) -> std::io::Result<()> {
        let time = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let line = serde_json::to_string(&Line {
            time,
            request_id,
            matches,
        })?;
        let mut out = self.out.lock().expect("activity log lock");
        writeln!(out, "{line}")?;
        out.flush()
    }
}
