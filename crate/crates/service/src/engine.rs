//! Detect → crop → preprocess → embed → match. Everything here runs on
//! queue workers, never on the request intake path.

use std::path::PathBuf;
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use siamface::data::{decode_pgm, preprocess, RawImage};
use siamface::gallery::Gallery;
use siamface::{Embedding, FaceImage, SiameseNetwork};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl FaceBox {
    fn within(&self, img: &RawImage) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= img.width && self.y + self.h <= img.height
    }
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, img: &RawImage) -> Vec<FaceBox>;
}

/// Treats the whole image as one face; right for pre-cropped inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThroughDetector;

impl Detector for PassThroughDetector {
    fn name(&self) -> &str {
        "pass-through"
    }

    fn detect(&self, img: &RawImage) -> Vec<FaceBox> {
        if img.width == 0 || img.height == 0 {
            return Vec::new();
        }
        vec![FaceBox {
            x: 0,
            y: 0,
            w: img.width,
            h: img.height,
        }]
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, face: &FaceImage) -> Result<Embedding, ServiceError>;
}

/// Embeds with a frozen network.
pub struct NetworkEmbedder {
    net: SiameseNetwork,
}

impl NetworkEmbedder {
    pub fn new(mut net: SiameseNetwork) -> Self {
        net.set_mode(siamface::nn::TrainMode::Evaluation);
        Self { net }
    }
}

impl Embedder for NetworkEmbedder {
    fn embed(&self, face: &FaceImage) -> Result<Embedding, ServiceError> {
        self.net.embed(face).map_err(|e| ServiceError::Internal(e.to_string()))
    }
}

/// Adds a fixed latency to every embedding; used to exercise back-pressure.
pub struct DelayedEmbedder<E> {
    pub inner: E,
    pub delay: Duration,
}

impl<E: Embedder> Embedder for DelayedEmbedder<E> {
    fn embed(&self, face: &FaceImage) -> Result<Embedding, ServiceError> {
        std::thread::sleep(self.delay);
        self.inner.embed(face)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub user_id: String,
    pub distance: f64,
    /// `1 / (1 + distance)`; higher is better.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub frame: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub request_id: String,
    pub matches: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frame_errors: Vec<FrameError>,
}

pub fn score(distance: f64) -> f64 {
    1.0 / (1.0 + distance)
}

pub struct Engine {
    embedder: Box<dyn Embedder>,
    detector: Box<dyn Detector>,
    gallery: RwLock<Gallery>,
    top_n: usize,
}

impl Engine {
    pub fn new(embedder: Box<dyn Embedder>, detector: Box<dyn Detector>, gallery: Gallery, top_n: usize) -> Self {
        Self {
            embedder,
            detector,
            gallery: RwLock::new(gallery),
            top_n: top_n.max(1),
        }
    }

    pub fn detector_name(&self) -> &str {
        self.detector.name()
    }

    pub fn gallery_len(&self) -> usize {
        self.gallery.read().expect("gallery lock").len()
    }

    pub fn gallery_path(&self) -> Option<PathBuf> {
        self.gallery.read().expect("gallery lock").path().map(Into::into)
    }

    /// Runs `f` against a consistent view of the gallery.
    pub fn with_gallery<T>(&self, f: impl FnOnce(&Gallery) -> T) -> T {
        f(&self.gallery.read().expect("gallery lock"))
    }

    fn faces(&self, pgm: &[u8], origin: &str) -> Result<Vec<FaceImage>, ServiceError> {
        let img = decode_pgm(pgm, origin).map_err(|e| ServiceError::Decode(e.to_string()))?;
        let mut faces = Vec::new();
        for b in self.detector.detect(&img) {
            if !b.within(&img) {
                tracing::warn!(detector = self.detector.name(), ?b, "dropping out-of-bounds face box");
                continue;
            }
            let crop = img.crop(b.x, b.y, b.w, b.h).map_err(|e| ServiceError::Decode(e.to_string()))?;
            faces.push(preprocess(&crop).map_err(|e| ServiceError::Decode(e.to_string()))?);
        }
        Ok(faces)
    }

    /// Embeds the first detected face of `pgm` and enrolls it under `user_id`.
    pub fn register(&self, user_id: &str, pgm: &[u8]) -> Result<Embedding, ServiceError> {
        if user_id.is_empty() {
            return Err(ServiceError::InvalidArgument("user_id must not be empty".into()));
        }
        let face = self.faces(pgm, "image")?.into_iter().next().ok_or(ServiceError::NoFace)?;
        let embedding = self.embedder.embed(&face)?;
        let mut g = self.gallery.write().expect("gallery lock");
        g.enroll(user_id, embedding)
            .map_err(|e| ServiceError::InvalidArgument(e.to_string()))?;
        g.flush().map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(embedding)
    }

    /// Matches every face of every frame and keeps the `top_n` nearest
    /// gallery records overall. Faceless frames contribute nothing;
    /// undecodable frames are reported per frame.
    pub fn recognize(&self, request_id: &str, frames: &[Vec<u8>]) -> Result<CandidateList, ServiceError> {
        let mut best: Vec<(f64, usize, String)> = Vec::new();
        let mut frame_errors = Vec::new();
        for (i, frame) in frames.iter().enumerate() {
            let faces = match self.faces(frame, &format!("frame {i}")) {
                Ok(f) => f,
                Err(e) => {
                    frame_errors.push(FrameError {
                        frame: i,
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            for face in faces {
                let probe = self.embedder.embed(&face)?;
                let matches = self
                    .gallery
                    .read()
                    .expect("gallery lock")
                    .top_k(&probe, self.top_n)
                    .map_err(|e| ServiceError::Internal(e.to_string()))?;
                for m in matches {
                    match best.iter_mut().find(|b| b.1 == m.index) {
                        Some(b) if m.distance < b.0 => b.0 = m.distance,
                        Some(_) => {}
                        None => best.push((m.distance, m.index, m.user_id)),
                    }
                }
            }
        }
        best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        best.truncate(self.top_n);
        Ok(CandidateList {
            request_id: request_id.to_string(),
            matches: best
                .into_iter()
                .map(|(distance, _, user_id)| Candidate {
                    user_id,
                    distance,
                    score: score(distance),
                })
                .collect(),
            frame_errors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use siamface::data::encode_pgm;

    /// Embeds a face as its mean brightness in every coordinate.
    struct MeanEmbedder;

    impl Embedder for MeanEmbedder {
        fn embed(&self, face: &FaceImage) -> Result<Embedding, ServiceError> {
            let m = face.pixels.iter().sum::<f32>() / face.pixels.len() as f32;
            Ok(Embedding::new([m; 5]).unwrap())
        }
    }

    struct NoFaces;

    impl Detector for NoFaces {
        fn name(&self) -> &str {
            "none"
        }
        fn detect(&self, _: &RawImage) -> Vec<FaceBox> {
            Vec::new()
        }
    }

    fn pgm(v: u8) -> Vec<u8> {
        encode_pgm(&RawImage::filled(92, 112, v))
    }

    fn engine(detector: Box<dyn Detector>) -> Engine {
        Engine::new(Box::new(MeanEmbedder), detector, Gallery::new(), 3)
    }

    #[test]
    fn register_appends_even_for_repeats() {
        let e = engine(Box::new(PassThroughDetector));
        e.register("7", &pgm(100)).unwrap();
        e.register("7", &pgm(100)).unwrap();
        assert_eq!(e.gallery_len(), 2);
        assert!(matches!(e.register("", &pgm(1)), Err(ServiceError::InvalidArgument(_))));
        assert!(matches!(e.register("x", b"not a pgm"), Err(ServiceError::Decode(_))));
    }

    #[test]
    fn register_without_face_fails() {
        let e = engine(Box::new(NoFaces));
        assert!(matches!(e.register("7", &pgm(1)), Err(ServiceError::NoFace)));
        assert_eq!(e.gallery_len(), 0);
    }

    #[test]
    fn recognize_ranks_and_scores() {
        let e = engine(Box::new(PassThroughDetector));
        for (id, v) in [("a", 10), ("b", 100), ("c", 200), ("d", 250)] {
            e.register(id, &pgm(v)).unwrap();
        }
        let r = e.recognize("r1", &[pgm(190)]).unwrap();
        let ids: Vec<_> = r.matches.iter().map(|m| m.user_id.as_str()).collect();
        assert_eq!(ids, ["c", "d", "b"]);
        for m in &r.matches {
            assert!((m.score - 1.0 / (1.0 + m.distance)).abs() < 1e-15);
            assert!(m.score > 0.0 && m.score <= 1.0);
        }
    }

    #[test]
    fn empty_gallery_and_faceless_frames_give_no_matches() {
        let e = engine(Box::new(PassThroughDetector));
        assert!(e.recognize("r", &[pgm(5)]).unwrap().matches.is_empty());
        let e = engine(Box::new(NoFaces));
        let r = e.recognize("r", &[pgm(5), pgm(6)]).unwrap();
        assert!(r.matches.is_empty() && r.frame_errors.is_empty());
    }

    #[test]
    fn bad_frames_are_reported_and_skipped() {
        let e = engine(Box::new(PassThroughDetector));
        e.register("a", &pgm(50)).unwrap();
        let r = e.recognize("r", &[b"garbage".to_vec(), pgm(50)]).unwrap();
        assert_eq!(r.frame_errors.len(), 1);
        assert_eq!(r.frame_errors[0].frame, 0);
        assert_eq!(r.matches[0].user_id, "a");
        assert_eq!(r.matches[0].distance, 0.0);
    }

    #[test]
    fn a_record_is_listed_once_across_frames() {
        let e = engine(Box::new(PassThroughDetector));
        e.register("a", &pgm(50)).unwrap();
        e.register("b", &pgm(90)).unwrap();
        let r = e.recognize("r", &[pgm(50), pgm(52), pgm(51)]).unwrap();
        assert_eq!(r.matches.len(), 2);
        assert_eq!(r.matches[0].distance, 0.0);
    }
}
