//! Procedural stand-in for the ORL corpus.
//!
//! Renders 40 synthetic "subjects" × 10 "shots" as 92×112 greymaps in the
//! ORL directory layout. Each subject has fixed facial geometry, tone,
//! texture and accessories; each shot perturbs pose, scale, lighting,
//! expression and sensor noise. Used by tests and demos when the real
//! corpus is not on disk.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{path_string, preprocess, save_pgm, subject_dir, DataError, FaceImage, RawImage};
use super::{ORL_SHOTS, ORL_SUBJECTS};

pub const ORL_WIDTH: usize = 92;
pub const ORL_HEIGHT: usize = 112;

#[derive(Debug, Clone)]
struct Subject {
    background: f64,
    skin: f64,
    head_rx: f64,
    head_ry: f64,
    hair_tone: f64,
    hairline: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_r: f64,
    brow_gap: f64,
    brow_tilt: f64,
    nose_len: f64,
    mouth_y: f64,
    mouth_w: f64,
    glasses: bool,
    beard: f64,
    texture: [(f64, f64, f64, f64); 3],
}

#[derive(Debug, Clone)]
struct Shot {
    dx: f64,
    dy: f64,
    scale: f64,
    angle: f64,
    brightness: f64,
    contrast: f64,
    side_light: f64,
    smile: f64,
    eye_open: f64,
    noise: f64,
}

fn subject_params(rng: &mut ChaCha8Rng) -> Subject {
    let mut tex = [(0.0, 0.0, 0.0, 0.0); 3];
    for t in &mut tex {
        *t = (
            rng.gen_range(1.0..4.0),
            rng.gen_range(1.0..4.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(6.0..16.0),
        );
    }
    Subject {
        background: rng.gen_range(15.0..90.0),
        skin: rng.gen_range(105.0..200.0),
        head_rx: rng.gen_range(0.62..0.80),
        head_ry: rng.gen_range(0.70..0.86),
        hair_tone: rng.gen_range(10.0..90.0),
        hairline: rng.gen_range(-0.75..-0.35),
        eye_y: rng.gen_range(-0.28..-0.08),
        eye_dx: rng.gen_range(0.20..0.34),
        eye_r: rng.gen_range(0.05..0.10),
        brow_gap: rng.gen_range(0.08..0.17),
        brow_tilt: rng.gen_range(-0.25..0.25),
        nose_len: rng.gen_range(0.15..0.32),
        mouth_y: rng.gen_range(0.32..0.50),
        mouth_w: rng.gen_range(0.12..0.28),
        glasses: rng.gen_bool(0.3),
        beard: if rng.gen_bool(0.25) { rng.gen_range(30.0..70.0) } else { 0.0 },
        texture: tex,
    }
}

fn shot_params(rng: &mut ChaCha8Rng) -> Shot {
    Shot {
        dx: rng.gen_range(-3.0..3.0),
        dy: rng.gen_range(-3.0..3.0),
        scale: rng.gen_range(0.94..1.06),
        angle: rng.gen_range(-0.08..0.08),
        brightness: rng.gen_range(-14.0..14.0),
        contrast: rng.gen_range(0.88..1.12),
        side_light: rng.gen_range(-12.0..12.0),
        smile: rng.gen_range(0.6..1.6),
        eye_open: rng.gen_range(0.5..1.1),
        noise: rng.gen_range(3.0..7.0),
    }
}

fn smooth_inside(d: f64, softness: f64) -> f64 {
    // 1 inside (d < 1), 0 outside, linear ramp of width `softness`
    ((1.0 - d) / softness + 0.5).clamp(0.0, 1.0)
}

fn ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> f64 {
    (((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2)).sqrt()
}

fn render(s: &Subject, shot: &Shot, rng: &mut ChaCha8Rng) -> RawImage {
    let (w, h) = (ORL_WIDTH, ORL_HEIGHT);
    let noise = Normal::new(0.0, shot.noise).expect("positive sigma");
    let (sin, cos) = shot.angle.sin_cos();
    let half_w = w as f64 / 2.0;
    let half_h = h as f64 / 2.0;
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            // image → face coordinates, roughly [-1, 1] across the head
            let px = (x as f64 - half_w - shot.dx) / (half_w * shot.scale);
            let py = (y as f64 - half_h - shot.dy) / (half_h * shot.scale);
            let u = cos * px + sin * py;
            let v = -sin * px + cos * py;

            let mut val = s.background + 10.0 * v;
            let head = smooth_inside(ellipse(u, v, 0.0, 0.05, s.head_rx, s.head_ry), 0.06);
            let mut face = s.skin;
            for &(fu, fv, ph, amp) in &s.texture {
                face += amp * (fu * u * 3.0 + fv * v * 3.0 + ph).sin();
            }
            if v < s.hairline {
                face = s.hair_tone;
            }
            let eye_open = shot.eye_open;
            for side in [-1.0, 1.0] {
                let eu = side * s.eye_dx;
                let e = smooth_inside(ellipse(u, v, eu, s.eye_y, s.eye_r * 1.4, s.eye_r * eye_open), 0.25);
                face = face * (1.0 - e) + 35.0 * e;
                let brow_v = s.eye_y - s.brow_gap + side * s.brow_tilt * (u - eu) * 0.3;
                let b = smooth_inside(ellipse(u, v, eu, brow_v, s.eye_r * 2.2, 0.025), 0.3);
                face = face * (1.0 - b) + (s.hair_tone + 10.0) * b;
                if s.glasses {
                    let d = ellipse(u, v, eu, s.eye_y, s.eye_r * 2.6, s.eye_r * 2.2);
                    if (0.92..1.08).contains(&d) {
                        face = 20.0;
                    }
                }
            }
            let nose = smooth_inside(ellipse(u, v, 0.02, s.eye_y + s.nose_len / 2.0 + 0.05, 0.035, s.nose_len / 2.0), 0.4);
            face -= 28.0 * nose;
            let m = smooth_inside(
                ellipse(u, v, 0.0, s.mouth_y, s.mouth_w * (0.8 + 0.2 * shot.smile), 0.025 * shot.smile),
                0.3,
            );
            face = face * (1.0 - m) + 55.0 * m;
            if s.beard > 0.0 && v > s.mouth_y - 0.05 {
                face -= s.beard * smooth_inside(ellipse(u, v, 0.0, s.mouth_y + 0.15, s.head_rx * 0.8, 0.3), 0.2);
            }
            val = val * (1.0 - head) + face * head;
            val += shot.side_light * u;
            val = (val - 128.0) * shot.contrast + 128.0 + shot.brightness;
            val += noise.sample(rng);
            pixels.push(val.round().clamp(0.0, 255.0) as u8);
        }
    }
    RawImage { width: w, height: h, pixels }
}

fn subject_rng(seed: u64, subject: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (subject as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Renders one 92×112 image of `subject` (1-based) in pose `shot` (1-based).
pub fn render_shot(seed: u64, subject: u32, shot: u32) -> RawImage {
    let params = subject_params(&mut subject_rng(seed, subject));
    let mut rng = subject_rng(seed.wrapping_add(shot as u64 * 7919), subject ^ 0xA5A5_0000);
    let shot_p = shot_params(&mut rng);
    render(&params, &shot_p, &mut rng)
}

/// Writes the 40×10 stand-in corpus as `<root>/s<subject>/<shot>.pgm`.
pub fn write_corpus(root: impl AsRef<Path>, seed: u64) -> Result<(), DataError> {
    let root = root.as_ref();
    for subject in 1..=ORL_SUBJECTS {
        let dir = subject_dir(root, subject);
        std::fs::create_dir_all(&dir).map_err(|source| DataError::Io {
            path: path_string(&dir),
            source,
        })?;
        for shot in 1..=ORL_SHOTS {
            save_pgm(&render_shot(seed, subject, shot), dir.join(format!("{shot}.pgm")))?;
        }
    }
    Ok(())
}

/// The stand-in corpus, preprocessed, in subject/shot order.
pub fn corpus(seed: u64) -> Vec<FaceImage> {
    let mut out = Vec::with_capacity((ORL_SUBJECTS * ORL_SHOTS) as usize);
    for subject in 1..=ORL_SUBJECTS {
        for shot in 1..=ORL_SHOTS {
            let raw = render_shot(seed, subject, shot);
            let face = preprocess(&raw).expect("rendered images are 92×112");
            out.push(face.with_source(format!("s{subject}/{shot}.pgm"), subject, shot));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_corpus;

    #[test]
    fn rendering_is_deterministic_and_varies_by_shot() {
        let a = render_shot(1, 3, 2);
        assert_eq!((a.width, a.height), (92, 112));
        assert_eq!(a, render_shot(1, 3, 2));
        assert_ne!(a, render_shot(1, 3, 4));
        assert_ne!(a, render_shot(1, 4, 2));
    }

    #[test]
    fn written_corpus_loads_in_orl_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 5).unwrap();
        let raw = crate::data::load_pgm(dir.path().join("s1/1.pgm")).unwrap();
        assert_eq!((raw.width, raw.height), (92, 112));
        let imgs = load_corpus(dir.path()).unwrap();
        assert_eq!(imgs.len(), 400);
        assert_eq!((imgs[0].subject_id, imgs[0].shot_id), (1, 1));
        assert_eq!((imgs[399].subject_id, imgs[399].shot_id), (40, 10));
        assert_eq!(imgs[17].pixels, corpus(5)[17].pixels);
    }
}
