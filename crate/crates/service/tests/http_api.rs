use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::{json, Value};
use siamface::data::{encode_pgm, synth};
use siamface::gallery::Gallery;
use siamface::presence::MemoryDirectory;
use siamface::{Embedding, FaceImage};
use siamface_service::engine::DelayedEmbedder;
use siamface_service::{start, Components, Embedder, PassThroughDetector, RunningService, ServiceConfig, ServiceError};

/// Five horizontal band means: cheap, deterministic and image-dependent.
struct BandEmbedder;

impl Embedder for BandEmbedder {
    fn embed(&self, face: &FaceImage) -> Result<Embedding, ServiceError> {
        let band = face.pixels.len() / 5;
        let v: [f32; 5] = std::array::from_fn(|i| face.pixels[i * band..(i + 1) * band].iter().sum::<f32>() / band as f32);
        Ok(Embedding::new(v).unwrap())
    }
}

fn b64_shot(subject: u32, shot: u32) -> String {
    base64::engine::general_purpose::STANDARD.encode(encode_pgm(&synth::render_shot(3, subject, shot)))
}

fn parts(embedder: Box<dyn Embedder>) -> Components {
    let mut dir = MemoryDirectory::new();
    dir.insert("7", "Seven", "Engineer");
    Components {
        embedder,
        detector: Box::new(PassThroughDetector),
        gallery: Gallery::new(),
        directory: Box::new(dir),
    }
}

fn config() -> ServiceConfig {
    ServiceConfig {
        port: 0,
        tick_interval: Duration::from_millis(20),
        ..Default::default()
    }
}

async fn serve(cfg: ServiceConfig, embedder: Box<dyn Embedder>) -> (RunningService, String) {
    let svc = start(&cfg, parts(embedder)).await.unwrap();
    let base = format!("http://{}", svc.addr);
    (svc, base)
}

async fn post_json(c: &reqwest::Client, url: String, body: Value) -> (u16, Value) {
    let r = c.post(url).json(&body).send().await.unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap_or(Value::Null))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn register_then_recognize() {
    let (svc, base) = serve(config(), Box::new(BandEmbedder)).await;
    let c = reqwest::Client::new();
    for s in 1..=5 {
        let (st, body) = post_json(&c, format!("{base}/register"), json!({"user_id": s.to_string(), "image_b64": b64_shot(s, 1)})).await;
        assert_eq!(st, 200, "{body}");
        assert_eq!(body["status"], "ok");
        assert_eq!(body["embedding"].as_array().unwrap().len(), 5);
    }
    // same image twice makes two records
    post_json(&c, format!("{base}/register"), json!({"user_id": "3", "image_b64": b64_shot(3, 1)})).await;
    assert_eq!(svc.state.engine.gallery_len(), 6);

    let (st, body) = post_json(&c, format!("{base}/recognize"), json!({"request_id": "q1", "frames_b64": [b64_shot(3, 1)]})).await;
    assert_eq!(st, 200);
    assert_eq!(body["request_id"], "q1");
    let m = body["matches"].as_array().unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!((m[0]["user_id"].as_str(), m[0]["distance"].as_f64()), (Some("3"), Some(0.0)));
    assert_eq!(m[1]["user_id"], "3");
    let d: Vec<f64> = m.iter().map(|x| x["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
    for x in m {
        let (dist, score) = (x["distance"].as_f64().unwrap(), x["score"].as_f64().unwrap());
        assert!((score - 1.0 / (1.0 + dist)).abs() < 1e-12);
    }
    assert!(body.get("frame_errors").is_none());

    // identical input, identical answer
    let (_, again) = post_json(&c, format!("{base}/recognize"), json!({"request_id": "q1", "frames_b64": [b64_shot(3, 1)]})).await;
    assert_eq!(again, body);
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn request_validation_and_frame_errors() {
    let (svc, base) = serve(config(), Box::new(BandEmbedder)).await;
    let c = reqwest::Client::new();
    let (st, body) = post_json(&c, format!("{base}/register"), json!({"user_id": "", "image_b64": b64_shot(1, 1)})).await;
    assert_eq!((st, body["error"].as_str()), (400, Some("invalid_argument")));
    let (st, _) = post_json(&c, format!("{base}/recognize"), json!({"request_id": "r", "frames_b64": []})).await;
    assert_eq!(st, 400);
    let four = vec![b64_shot(1, 1); 4];
    let (st, _) = post_json(&c, format!("{base}/recognize"), json!({"request_id": "r", "frames_b64": four})).await;
    assert_eq!(st, 400);
    let r = c.post(format!("{base}/recognize")).body("{not json").send().await.unwrap();
    assert_eq!(r.status().as_u16(), 400);

    // empty gallery: well-formed, no matches; bad frames reported per frame
    let (st, body) = post_json(&c, format!("{base}/recognize"), json!({"request_id": "r", "frames_b64": ["%%%", b64_shot(1, 2), "UDU="]})).await;
    assert_eq!(st, 200);
    assert!(body["matches"].as_array().unwrap().is_empty());
    let errs: Vec<u64> = body["frame_errors"].as_array().unwrap().iter().map(|e| e["frame"].as_u64().unwrap()).collect();
    assert_eq!(errs, [0, 2]);
    svc.stop().await.unwrap();
}

async fn timed_get(c: &reqwest::Client, url: String) -> Duration {
    let t = Instant::now();
    let r = c.get(url).send().await.unwrap();
    assert!(r.status().is_success());
    r.bytes().await.unwrap();
    t.elapsed()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn status_stays_fast_and_overload_is_exact() {
    let cfg = ServiceConfig {
        queue_capacity: 4,
        workers: 1,
        ..config()
    };
    let slow = DelayedEmbedder {
        inner: BandEmbedder,
        delay: Duration::from_millis(500),
    };
    let (svc, base) = serve(cfg, Box::new(slow)).await;
    let c = reqwest::Client::new();
    let mut handles = Vec::new();
    let mut worst = Duration::ZERO;
    for i in 0..10 {
        let depth_before: u64 = c.get(format!("{base}/healthz")).send().await.unwrap().json::<Value>().await.unwrap()["queue_depth"]
            .as_u64()
            .unwrap();
        let (cc, url, frame) = (c.clone(), format!("{base}/recognize"), b64_shot(1, 1));
        let h = tokio::spawn(async move {
            let r = cc.post(url).json(&json!({"request_id": format!("b{i}"), "frames_b64": [frame]})).send().await.unwrap();
            let retry = r.headers().get("retry-after").is_some();
            (r.status().as_u16(), retry, r.json::<Value>().await.unwrap())
        });
        // wait until this request is either queued or refused
        let deadline = Instant::now() + Duration::from_millis(200);
        loop {
            let d = c.get(format!("{base}/healthz")).send().await.unwrap().json::<Value>().await.unwrap()["queue_depth"]
                .as_u64()
                .unwrap();
            if d > depth_before || h.is_finished() || Instant::now() > deadline {
                break;
            }
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
        handles.push((depth_before, h));
        worst = worst.max(timed_get(&c, format!("{base}/healthz")).await);
        worst = worst.max(timed_get(&c, format!("{base}/getUinfo")).await);
    }
    let mut ok = 0;
    for (depth_before, h) in handles {
        worst = worst.max(timed_get(&c, format!("{base}/healthz")).await);
        let (status, retry, body) = h.await.unwrap();
        if depth_before >= 4 {
            assert_eq!(status, 503, "queue was full at submission");
            assert_eq!(body["error"], "overloaded");
            assert_eq!(body["retryable"], true);
            assert!(retry);
        } else {
            assert_eq!(status, 200, "queue had room at submission");
            ok += 1;
        }
    }
    assert_eq!(ok, 4);
    assert!(worst < Duration::from_millis(50), "status latency {worst:?}");
    let m: Value = c.get(format!("{base}/metrics")).send().await.unwrap().json().await.unwrap();
    assert_eq!(m["received"], 10);
    assert_eq!(m["overloaded"], 6);
    assert_eq!(m["completed"], 4);
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn counters_balance_after_a_mixed_burst() {
    let cfg = ServiceConfig {
        queue_capacity: 3,
        ..config()
    };
    let slow = DelayedEmbedder {
        inner: BandEmbedder,
        delay: Duration::from_millis(30),
    };
    let (svc, base) = serve(cfg, Box::new(slow)).await;
    let c = reqwest::Client::new();
    let bodies = [
        json!({"user_id": "1", "image_b64": b64_shot(1, 1)}),
        json!({"user_id": "", "image_b64": b64_shot(1, 1)}),
        json!({"user_id": "2", "image_b64": "@@"}),
        json!({"user_id": "2", "image_b64": "UDU="}),
        json!({"nonsense": true}),
    ];
    let mut tasks = Vec::new();
    for i in 0..40 {
        let (cc, b) = (c.clone(), base.clone());
        let body = bodies[i % bodies.len()].clone();
        let rec = json!({"request_id": format!("m{i}"), "frames_b64": [b64_shot(2, 1)]});
        tasks.push(tokio::spawn(async move {
            if i % 2 == 0 {
                cc.post(format!("{b}/register")).json(&body).send().await.unwrap().status().as_u16()
            } else {
                cc.post(format!("{b}/recognize")).json(&rec).send().await.unwrap().status().as_u16()
            }
        }));
    }
    for t in tasks {
        let s = t.await.unwrap();
        assert!([200, 400, 503].contains(&s), "{s}");
    }
    let m: Value = c.get(format!("{base}/metrics")).send().await.unwrap().json().await.unwrap();
    let n = |k: &str| m[k].as_u64().unwrap();
    assert_eq!(n("received"), 40);
    assert_eq!(n("received"), n("completed") + n("failed") + n("overloaded"));
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn post_uid_drives_presence_and_events() {
    let (svc, base) = serve(config(), Box::new(BandEmbedder)).await;
    let c = reqwest::Client::new();
    let mut sse = c.get(format!("{base}/events")).send().await.unwrap();
    assert!(sse.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));

    let post = |body: &'static str| {
        c.post(format!("{base}/postUid"))
            .header("content-type", "application/x-www-form-urlencoded")
            .body(body)
            .send()
    };
    let low = post("uid1=9&value1=0.2&uid2=8&value2=0.1&uid3=&value3=").await.unwrap();
    assert!(low.text().await.unwrap().starts_with("Got a POST request:: "));
    let r = post("uid1=7&value1=0.9&uid2=8&value2=0.1&uid3=6&value3=0.05").await.unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(post("value1=0.9").await.unwrap().status().as_u16(), 400);

    let mut text = String::new();
    let deadline = Instant::now() + Duration::from_secs(3);
    while !text.contains("\"uid\":\"7\"") && Instant::now() < deadline {
        if let Ok(Ok(Some(chunk))) = tokio::time::timeout(Duration::from_millis(500), sse.chunk()).await {
            text.push_str(&String::from_utf8_lossy(&chunk));
        }
    }
    assert!(text.contains("\"uid\":\"7\""), "{text}");
    assert!(text.contains("\"username\":\"Seven\""), "{text}");
    assert!(!text.contains("\"uid\":\"9\""));

    let slots: Value = c.get(format!("{base}/getUinfo")).send().await.unwrap().json().await.unwrap();
    assert_eq!(slots[0]["uid"], "7");
    assert_eq!(slots[0]["stat"], "OnScreen");
    assert_eq!(slots.as_array().unwrap().len(), 4);
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn recognitions_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("activity.jsonl");
    let cfg = ServiceConfig {
        activity_log: Some(log.clone()),
        ..config()
    };
    let (svc, base) = serve(cfg, Box::new(BandEmbedder)).await;
    let c = reqwest::Client::new();
    post_json(&c, format!("{base}/register"), json!({"user_id": "4", "image_b64": b64_shot(4, 1)})).await;
    for id in ["a", "b"] {
        post_json(&c, format!("{base}/recognize"), json!({"request_id": id, "frames_b64": [b64_shot(4, 2)]})).await;
    }
    svc.stop().await.unwrap();
    let lines: Vec<Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["request_id"], "b");
    assert_eq!(lines[1]["matches"][0]["user_id"], "4");
}
