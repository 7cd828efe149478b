//! Frame-directory capture client.
//!
//! Frames pass through a [`CaptureGate`]; every group of `frames_per_event`
//! captured frames becomes one `POST /recognize`. A trailing partial group
//! is sent when the directory runs out.

use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde::Serialize;
use serde_json::{json, Value};
use siamface::data::{decode_pgm, RawImage};
use siamface::motion::CaptureGate;

use crate::{ClientArgs, CliError};

#[derive(Debug, Clone, Serialize)]
pub struct ClientSummary {
    pub frames_read: usize,
    /// Number of frames in each submitted request, in order.
    pub frames_per_request: Vec<usize>,
    pub responses: Vec<Value>,
}

impl ClientSummary {
    pub fn requests(&self) -> usize {
        self.frames_per_request.len()
    }
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
            .path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn read_frame(path: &Path) -> Result<(Vec<u8>, RawImage), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let raw = decode_pgm(&bytes, &path.display().to_string())?;
    Ok((bytes, raw))
}

/// Posts `body`, retrying connection failures and 503s with doubling delays.
pub fn post_with_retry(
    http: &reqwest::blocking::Client,
    url: &str,
    body: &Value,
    retries: u32,
    backoff: Duration,
) -> Result<Value, CliError> {
    let mut delay = backoff;
    let mut last = String::new();
    for attempt in 0..=retries {
        if attempt > 0 {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match http.post(url).json(body).send() {
            Ok(resp) if resp.status() == reqwest::StatusCode::SERVICE_UNAVAILABLE => {
                last = format!("server overloaded ({})", resp.status());
            }
            Ok(resp) if resp.status().is_success() => {
                return resp
                    .json()
                    .map_err(|e| CliError::Runtime(format!("unreadable response from {url}: {e}")));
            }
            Ok(resp) => {
                let status = resp.status();
                let text = resp.text().unwrap_or_default();
                return Err(CliError::Runtime(format!("{url} answered {status}: {text}")));
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(CliError::Runtime(format!(
        "giving up on {url} after {} attempts: {last}",
        retries + 1
    )))
}

pub fn run(a: &ClientArgs, json: bool) -> Result<ClientSummary, CliError> {
    let mut gate = CaptureGate::new(a.tau, a.frames_per_event, a.cooldown_ms)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let http = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let url = format!("{}/recognize", a.server.trim_end_matches('/'));
    let paths = frame_paths(&a.frames)?;
    let mut summary = ClientSummary {
        frames_read: paths.len(),
        frames_per_request: Vec::new(),
        responses: Vec::new(),
    };
    let mut group: Vec<String> = Vec::new();
    let b64 = base64::engine::general_purpose::STANDARD;

    let send = |group: &mut Vec<String>, summary: &mut ClientSummary| -> Result<(), CliError> {
        let n = summary.requests() + 1;
        let body = json!({ "request_id": format!("client-{n}"), "frames_b64": group });
        let resp = post_with_retry(&http, &url, &body, a.retries, Duration::from_millis(a.backoff_ms))?;
        if !json {
            print_response(&resp);
        }
        summary.frames_per_request.push(group.len());
        summary.responses.push(resp);
        group.clear();
        Ok(())
    };

    for (i, path) in paths.iter().enumerate() {
        let (bytes, raw) = read_frame(path)?;
        let now = i as u64 * a.frame_interval_ms;
        if gate.observe(&raw, now).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))? {
            group.push(b64.encode(&bytes));
            if group.len() == a.frames_per_event {
                send(&mut group, &mut summary)?;
            }
        }
    }
    if !group.is_empty() {
        send(&mut group, &mut summary)?;
    }
    if json {
        println!(
            "{}",
            serde_json::to_string(&summary).map_err(|e| CliError::Runtime(e.to_string()))?
        );
    } else {
        println!("{} frames read, {} requests sent", summary.frames_read, summary.requests());
    }
    Ok(summary)
}

fn print_response(resp: &Value) {
    let id = resp["request_id"].as_str().unwrap_or("?");
    let matches = resp["matches"].as_array().map(Vec::as_slice).unwrap_or_default();
    if matches.is_empty() {
        println!("{id}: no match");
    }
    for m in matches {
        println!(
            "{id}: {} distance {:.4}",
            m["user_id"].as_str().unwrap_or("?"),
            m["distance"].as_f64().unwrap_or(f64::NAN)
        );
    }
}
