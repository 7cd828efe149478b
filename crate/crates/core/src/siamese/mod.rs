//! The face embedding network and its contrastive training.

mod eval;
mod loss;
mod network;
mod train;

pub use eval::{best_threshold_accuracy, evaluate, median, EvalMetrics};
pub use loss::{contrastive_batch, contrastive_loss, gradcheck_contrastive, ContrastiveBatch, DEFAULT_MARGIN};
pub use network::{golden_descriptor, images_to_tensor, Embedding, SiameseNetwork, EMBEDDING_DIM, FLATTEN_WIDTH};
pub use train::{train, train_step, EpochReport, TrainConfig};

use crate::data::DataError;
use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum SiameseError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = SiameseError> = std::result::Result<T, E>;

/// Euclidean distance between two embeddings, accumulated in `f64`.
pub fn euclidean_distance(u: &Embedding, v: &Embedding) -> f64 {
    u.values()
        .iter()
        .zip(v.values())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: [f32; 5]) -> Embedding {
        Embedding::new(v).unwrap()
    }

    #[test]
    fn printed_vector_pairs() {
        let face1 = emb([1.7350, 0.2165, 1.0214, 1.5764, 2.2253]);
        let other = emb([-0.7570, 1.5081, 0.3380, 1.5524, -0.0977]);
        let same = emb([1.6301, 0.7585, 1.1658, 1.6345, 2.2486]);
        assert!((euclidean_distance(&face1, &other) - 3.7070).abs() < 5e-4);
        assert!((euclidean_distance(&face1, &same) - 0.5741).abs() < 5e-4);
        assert_eq!(euclidean_distance(&same, &same), 0.0);
    }

    fn arb_embedding() -> impl Strategy<Value = Embedding> {
        proptest::array::uniform5(-10.0f32..10.0).prop_map(|v| Embedding::new(v).unwrap())
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in arb_embedding(), b in arb_embedding(), c in arb_embedding()) {
            let ab = euclidean_distance(&a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, euclidean_distance(&b, &a));
            prop_assert!(ab <= euclidean_distance(&a, &c) + euclidean_distance(&c, &b) + 1e-9);
        }
    }
}
