//! Siamese face embedding and matching.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: a small tensor engine with exactly the layers the face network
//!   needs, reverse-mode gradients, momentum SGD and finite-difference checks.
//! * [`data`]: PGM decoding, resampling to the 100×100 network input, the
//!   ORL corpus layout, train/test splits and pair sampling.
//! * [`siamese`]: the embedding network, contrastive objective, training
//!   and held-out evaluation.
//! * [`gallery`]: enrolled `(user_id, embedding)` records and top-k search.
//! * [`presence`]: the display board state machine driven by recognition
//!   results.
//! * [`motion`]: frame differencing used by capture clients.

pub mod data;
pub mod gallery;
pub mod motion;
pub mod nn;
pub mod presence;
pub mod siamese;

pub use data::FaceImage;
pub use gallery::{Gallery, GalleryRecord, Match};
pub use siamese::{euclidean_distance, Embedding, SiameseNetwork};
