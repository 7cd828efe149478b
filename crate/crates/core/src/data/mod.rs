//! Face images: decoding, resampling to the network input, the ORL corpus
//! layout, train/test splits and genuine/impostor pair sampling.

mod corpus;
pub mod pgm;
pub mod synth;

use std::path::PathBuf;

pub use corpus::{
    load_corpus, sample_pairs, split, write_manifest, DataSplit, PairLabel, PairIndex, PairSample,
    PairSampler, ORL_IMAGE_COUNT, ORL_SHOTS, ORL_SUBJECTS,
};
pub use pgm::{decode_pgm, encode_pgm, load_pgm, save_pgm, RawImage};

/// Side length of the square network input.
pub const FACE_SIZE: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A preprocessed face: 100×100 greyscale in `[0, 1]`, row-major.
///
/// `subject_id` and `shot_id` are 1-based corpus coordinates, or 0 for
/// images that did not come from a labelled corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    pub pixels: Vec<f32>,
    pub source_path: String,
    pub subject_id: u32,
    pub shot_id: u32,
}

impl FaceImage {
    pub fn from_pixels(pixels: Vec<f32>) -> Result<Self, DataError> {
        if pixels.len() != FACE_SIZE * FACE_SIZE {
            return Err(DataError::InvalidArgument(format!(
                "face image needs {} pixels, got {}",
                FACE_SIZE * FACE_SIZE,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            source_path: String::new(),
            subject_id: 0,
            shot_id: 0,
        })
    }

    pub fn with_source(mut self, path: impl Into<String>, subject_id: u32, shot_id: u32) -> Self {
        self.source_path = path.into();
        self.subject_id = subject_id;
        self.shot_id = shot_id;
        self
    }
}

/// Bilinear resample to 100×100 with corner pixels anchored to the source
/// corners, scaled to `[0, 1]` by `/255`.
pub fn preprocess(raw: &RawImage) -> Result<FaceImage, DataError> {
    if raw.width < 2 || raw.height < 2 {
        return Err(DataError::InvalidArgument(format!(
            "image {}×{} is too small to resample",
            raw.width, raw.height
        )));
    }
    let n = FACE_SIZE;
    let sx = (raw.width - 1) as f64 / (n - 1) as f64;
    let sy = (raw.height - 1) as f64 / (n - 1) as f64;
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        let fy = y as f64 * sy;
        let y0 = (fy.floor() as usize).min(raw.height - 1);
        let y1 = (y0 + 1).min(raw.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..n {
            let fx = x as f64 * sx;
            let x0 = (fx.floor() as usize).min(raw.width - 1);
            let x1 = (x0 + 1).min(raw.width - 1);
            let tx = fx - x0 as f64;
            let p = |xx, yy| raw.get(xx, yy) as f64;
            let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
            let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
            let v = (top * (1.0 - ty) + bottom * ty) / 255.0;
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(FaceImage {
        pixels,
        source_path: String::new(),
        subject_id: 0,
        shot_id: 0,
    })
}

pub(crate) fn path_string(p: &std::path::Path) -> String {
    p.display().to_string()
}

pub(crate) fn subject_dir(root: &std::path::Path, subject: u32) -> PathBuf {
    root.join(format!("s{subject}"))
}
