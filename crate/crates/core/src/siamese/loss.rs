use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, SiameseError};
use crate::data::PairLabel;
use crate::nn::gradcheck::{numeric_gradient, relative_error, GradCheckReport, FD_STEP};
use crate::nn::Float;

pub const DEFAULT_MARGIN: f64 = 2.0;

/// Contrastive loss of one pair at distance `d`.
///
/// Genuine pairs cost `d²/2`; impostor pairs cost `max(0, margin − d)²/2`.
pub fn contrastive_loss(d: f64, label: PairLabel, margin: f64) -> f64 {
    match label {
        PairLabel::Genuine => 0.5 * d * d,
        PairLabel::Impostor => 0.5 * (margin - d).max(0.0).powi(2),
    }
}

/// Mean loss over a batch and its gradients w.r.t. both embedding rows.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<T> {
    pub loss: f64,
    pub grad_a: Vec<T>,
    pub grad_b: Vec<T>,
}

/// Evaluates the mean contrastive loss of `B` pairs whose embeddings are the
/// rows of `a` and `b` (each `B×dim`, row-major).
///
/// At `d = 0` the impostor gradient is taken as zero.
pub fn contrastive_batch<T: Float>(
    a: &[T],
    b: &[T],
    labels: &[PairLabel],
    dim: usize,
    margin: f64,
) -> Result<ContrastiveBatch<T>> {
    let n = labels.len();
    if n == 0 || dim == 0 || a.len() != n * dim || b.len() != n * dim {
        return Err(SiameseError::InvalidArgument(format!(
            "contrastive batch of {n} pairs × {dim} needs {} values per side, got {} and {}",
            n * dim,
            a.len(),
            b.len()
        )));
    }
    if margin.is_nan() || margin <= 0.0 {
        return Err(SiameseError::InvalidArgument(format!("margin must be positive, got {margin}")));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad_a = vec![T::zero(); n * dim];
    let mut grad_b = vec![T::zero(); n * dim];
    for (i, &label) in labels.iter().enumerate() {
        let row = i * dim..(i + 1) * dim;
        let diff: Vec<f64> = a[row.clone()]
            .iter()
            .zip(&b[row.clone()])
            .map(|(x, y)| x.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN))
            .collect();
        let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        loss += contrastive_loss(d, label, margin);
        // ∂L/∂diff; ∂L/∂a = coeff·diff and ∂L/∂b = −coeff·diff
        let coeff = match label {
            PairLabel::Genuine => 1.0,
            PairLabel::Impostor if d > 0.0 && d < margin => -(margin - d) / d,
            PairLabel::Impostor => 0.0,
        };
        for (k, dv) in diff.iter().enumerate() {
            let g = coeff * dv * scale;
            grad_a[i * dim + k] = T::lit(g);
            grad_b[i * dim + k] = T::lit(-g);
        }
    }
    Ok(ContrastiveBatch {
        loss: loss * scale,
        grad_a,
        grad_b,
    })
}

/// Finite-difference check of [`contrastive_batch`] in `f64`.
///
/// Impostor pairs are drawn with `d` kept at least 0.05 away from the margin
/// so the central difference never straddles the hinge.
pub fn gradcheck_contrastive(instances: usize, seed: u64) -> Result<GradCheckReport> {
    const PAIRS: usize = 6;
    const DIM: usize = 5;
    let margin = DEFAULT_MARGIN;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let labels: Vec<PairLabel> = (0..PAIRS)
            .map(|i| if i % 2 == 0 { PairLabel::Genuine } else { PairLabel::Impostor })
            .collect();
        let (a, b) = loop {
            let a: Vec<f64> = (0..PAIRS * DIM).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let b: Vec<f64> = (0..PAIRS * DIM).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let clear = (0..PAIRS).all(|i| {
                let d = (0..DIM).map(|k| (a[i * DIM + k] - b[i * DIM + k]).powi(2)).sum::<f64>().sqrt();
                (d - margin).abs() > 0.05 && d > 0.05
            });
            if clear {
                break (a, b);
            }
        };
        let analytic = contrastive_batch(&a, &b, &labels, DIM, margin)?;
        let f_a = |x: &[f64]| contrastive_batch(x, &b, &labels, DIM, margin).map(|r| r.loss).unwrap_or(f64::NAN);
        let f_b = |x: &[f64]| contrastive_batch(&a, x, &labels, DIM, margin).map(|r| r.loss).unwrap_or(f64::NAN);
        worst = worst.max(relative_error(&analytic.grad_a, &numeric_gradient(f_a, &a, FD_STEP)));
        worst = worst.max(relative_error(&analytic.grad_b, &numeric_gradient(f_b, &b, FD_STEP)));
    }
    Ok(GradCheckReport {
        name: "contrastive_loss".into(),
        instances,
        max_rel_error: worst,
    })
}
