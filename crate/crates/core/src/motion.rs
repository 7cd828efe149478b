//! Frame differencing for capture clients.

use crate::data::RawImage;

pub const DEFAULT_TAU: f64 = 8.0 / 255.0;
pub const DEFAULT_FRAMES_PER_EVENT: usize = 3;
pub const DEFAULT_COOLDOWN_MS: u64 = 2_000;

#[derive(Debug, thiserror::Error)]
pub enum MotionError {
    #[error("frame extents differ: {0}×{1} vs {2}×{3}")]
    ExtentMismatch(usize, usize, usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Triggered,
    Quiet,
}

/// Mean absolute pixel difference on the unit scale.
pub fn mean_abs_diff(prev: &RawImage, cur: &RawImage) -> Result<f64, MotionError> {
    if (prev.width, prev.height) != (cur.width, cur.height) {
        return Err(MotionError::ExtentMismatch(prev.width, prev.height, cur.width, cur.height));
    }
    if cur.pixels.is_empty() {
        return Ok(0.0);
    }
    let sum: u64 = prev
        .pixels
        .iter()
        .zip(&cur.pixels)
        .map(|(a, b)| a.abs_diff(*b) as u64)
        .sum();
    Ok(sum as f64 / (cur.pixels.len() as f64 * 255.0))
}

/// Triggered iff the mean absolute difference exceeds `tau`.
pub fn motion_gate(prev: &RawImage, cur: &RawImage, tau: f64) -> Result<Motion, MotionError> {
    Ok(if mean_abs_diff(prev, cur)? > tau {
        Motion::Triggered
    } else {
        Motion::Quiet
    })
}

/// Decides which frames of a stream to send: on motion, the triggering
/// frame and the next `frames_per_event − 1`, then nothing until the
/// cooldown has passed.
#[derive(Debug, Clone)]
pub struct CaptureGate {
    tau: f64,
    frames_per_event: usize,
    cooldown_ms: u64,
    prev: Option<RawImage>,
    remaining: usize,
    cooldown_until: u64,
}

impl Default for CaptureGate {
    fn default() -> Self {
        Self::new(DEFAULT_TAU, DEFAULT_FRAMES_PER_EVENT, DEFAULT_COOLDOWN_MS).expect("defaults are valid")
    }
}

impl CaptureGate {
    pub fn new(tau: f64, frames_per_event: usize, cooldown_ms: u64) -> Result<Self, MotionError> {
        if !(0.0..1.0).contains(&tau) || frames_per_event == 0 {
            return Err(MotionError::InvalidArgument(format!(
                "need tau in [0, 1) and at least one frame per event, got {tau} and {frames_per_event}"
            )));
        }
        Ok(Self {
            tau,
            frames_per_event,
            cooldown_ms,
            prev: None,
            remaining: 0,
            cooldown_until: 0,
        })
    }

    /// Feeds the frame seen at `now_ms`; returns whether to capture it.
    pub fn observe(&mut self, frame: &RawImage, now_ms: u64) -> Result<bool, MotionError> {
        let capture = if self.remaining > 0 {
            if let Some(prev) = &self.prev {
                mean_abs_diff(prev, frame)?;
            }
            self.remaining -= 1;
            true
        } else {
            let triggered = match &self.prev {
                Some(prev) => motion_gate(prev, frame, self.tau)? == Motion::Triggered,
                None => false,
            };
            if triggered && now_ms >= self.cooldown_until {
                self.remaining = self.frames_per_event - 1;
                true
            } else {
                false
            }
        };
        if capture && self.remaining == 0 {
            self.cooldown_until = now_ms + self.cooldown_ms;
        }
        self.prev = Some(frame.clone());
        Ok(capture)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(v: u8) -> RawImage {
        RawImage::filled(16, 12, v)
    }

    #[test]
    fn identical_frames_are_quiet() {
        assert_eq!(motion_gate(&flat(90), &flat(90), 0.0).unwrap(), Motion::Quiet);
    }

    #[test]
    fn black_to_white_triggers_below_one() {
        for tau in [0.0, 0.5, 0.999] {
            assert_eq!(motion_gate(&flat(0), &flat(255), tau).unwrap(), Motion::Triggered);
        }
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        let other = RawImage::filled(12, 16, 0);
        assert!(matches!(motion_gate(&flat(0), &other, 0.1), Err(MotionError::ExtentMismatch(..))));
    }

    #[test]
    fn half_tau_noise_stays_quiet() {
        let tau = DEFAULT_TAU;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = RawImage::filled(92, 112, 128);
        let amp = tau / 2.0 * 255.0;
        let quiet = (0..100)
            .filter(|_| {
                let mut noisy = base.clone();
                for p in &mut noisy.pixels {
                    *p = (*p as f64 + rng.gen_range(-amp..=amp)).round() as u8;
                }
                motion_gate(&base, &noisy, tau).unwrap() == Motion::Quiet
            })
            .count();
        assert!(quiet >= 99, "{quiet}/100 quiet");
    }

    #[test]
    fn gate_captures_n_frames_then_cools_down() {
        let mut gate = CaptureGate::new(0.1, 3, 2000).unwrap();
        let seq = [(0, 0), (100, 0), (200, 255), (300, 255), (400, 0), (500, 255), (2300, 0), (2500, 255)];
        let got: Vec<bool> = seq.iter().map(|&(t, v)| gate.observe(&flat(v), t).unwrap()).collect();
        assert_eq!(got, [false, false, true, true, true, false, false, true]);
    }

    #[test]
    fn static_stream_sends_nothing() {
        let mut gate = CaptureGate::default();
        assert!((0..50).all(|t| !gate.observe(&flat(40), t * 100).unwrap()));
    }
}
