use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{euclidean_distance, Result, SiameseError, SiameseNetwork};
use crate::data::{FaceImage, PairLabel, PairSampler};
use crate::nn::TrainMode;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    pub median_genuine_d: f64,
    pub median_impostor_d: f64,
    pub accuracy_at_best_threshold: f64,
    /// Pairs with distance ≤ threshold are predicted genuine.
    pub threshold: f64,
    pub pairs: usize,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub seed: u64,
}

/// Median of `values`; the mean of the middle two for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

/// Sweeps every observed distance as a threshold (plus "reject all") and
/// returns the threshold with the highest accuracy, preferring the smallest.
pub fn best_threshold_accuracy(genuine: &[f64], impostor: &[f64]) -> (f64, f64) {
    let total = genuine.len() + impostor.len();
    if total == 0 {
        return (0.0, 0.0);
    }
    let mut all: Vec<(f64, bool)> = genuine
        .iter()
        .map(|d| (*d, true))
        .chain(impostor.iter().map(|d| (*d, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    // threshold below every distance: everything predicted impostor
    let mut correct = impostor.len();
    let mut best = (f64::NEG_INFINITY, correct);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                correct += 1;
            } else {
                correct -= 1;
            }
            i += 1;
        }
        if correct > best.1 {
            best = (t, correct);
        }
    }
    (best.0, best.1 as f64 / total as f64)
}

/// Embeds every test image once, samples `pair_budget` balanced pairs and
/// reports distance medians and best-threshold accuracy.
pub fn evaluate(net: &SiameseNetwork, test: &[FaceImage], pair_budget: usize, seed: u64) -> Result<EvalMetrics> {
    if net.mode() != TrainMode::Evaluation {
        return Err(SiameseError::State("evaluation requires evaluation mode".into()));
    }
    if pair_budget == 0 {
        return Err(SiameseError::InvalidArgument("pair budget must be positive".into()));
    }
    let sampler = PairSampler::for_images(test);
    // both pair kinds must be drawable
    sampler.validate(0.5)?;
    let refs: Vec<&FaceImage> = test.iter().collect();
    let embeddings = net.embed_batch(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for p in sampler.draw_many(pair_budget, 0.5, &mut rng)? {
        let d = euclidean_distance(&embeddings[p.a], &embeddings[p.b]);
        match p.label {
            PairLabel::Genuine => genuine.push(d),
            PairLabel::Impostor => impostor.push(d),
        }
    }
    let (threshold, accuracy) = best_threshold_accuracy(&genuine, &impostor);
    Ok(EvalMetrics {
        median_genuine_d: median(&genuine).unwrap_or(f64::NAN),
        median_impostor_d: median(&impostor).unwrap_or(f64::NAN),
        accuracy_at_best_threshold: accuracy,
        threshold,
        pairs: pair_budget,
        genuine_pairs: genuine.len(),
        impostor_pairs: impostor.len(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn separable_sets_reach_full_accuracy() {
        let (t, acc) = best_threshold_accuracy(&[0.1, 0.2, 0.3], &[1.0, 2.0]);
        assert_eq!(acc, 1.0);
        assert_eq!(t, 0.3);
    }

    #[test]
    fn tied_distances_move_together() {
        // a genuine and an impostor at the same distance cannot be split
        let (_, acc) = best_threshold_accuracy(&[0.0, 0.5], &[0.5, 1.0]);
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn all_impostor_threshold_is_a_candidate() {
        let (t, acc) = best_threshold_accuracy(&[5.0], &[1.0, 2.0]);
        assert_eq!(t, f64::NEG_INFINITY);
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn too_small_test_sets_are_rejected() {
        let net = SiameseNetwork::new(0);
        let one = FaceImage::from_pixels(vec![0.5; 100 * 100]).unwrap().with_source("s1/1.pgm", 1, 1);
        let two = one.clone().with_source("s1/2.pgm", 1, 2);
        // one subject: no impostor pairs possible
        assert!(evaluate(&net, &[one, two], 10, 0).is_err());
    }

    fn oracle(genuine: &[f64], impostor: &[f64]) -> f64 {
        let mut cands: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
        cands.push(f64::NEG_INFINITY);
        let total = (genuine.len() + impostor.len()) as f64;
        cands
            .iter()
            .map(|t| {
                let ok = genuine.iter().filter(|d| *d <= t).count() + impostor.iter().filter(|d| *d > t).count();
                ok as f64 / total
            })
            .fold(0.0, f64::max)
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force(
            g in proptest::collection::vec(0u8..20, 0..30),
            i in proptest::collection::vec(0u8..20, 1..30),
        ) {
            let g: Vec<f64> = g.into_iter().map(|v| v as f64 / 4.0).collect();
            let i: Vec<f64> = i.into_iter().map(|v| v as f64 / 4.0).collect();
            let (_, acc) = best_threshold_accuracy(&g, &i);
            prop_assert!((acc - oracle(&g, &i)).abs() < 1e-12);
        }
    }
}
