use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{contrastive_batch, images_to_tensor, Result, SiameseError, SiameseNetwork, EMBEDDING_DIM};
use crate::data::{FaceImage, PairLabel, PairSampler};
use crate::nn::{Sgd, Tensor, TrainMode};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub margin: f64,
    /// Seeds pair sampling. Weight initialisation is seeded by the network.
    pub seed: u64,
    /// Probability that a sampled pair is genuine.
    pub genuine_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 5e-4,
            momentum: 0.9,
            margin: super::DEFAULT_MARGIN,
            seed: 0,
            genuine_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SiameseError::InvalidArgument(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "need learning rate > 0 and momentum in [0, 1), got {} and {}",
                self.learning_rate, self.momentum
            ));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Loss of the epoch's final batch; this is the printed value.
    pub loss: f64,
    /// Mean batch loss over the epoch.
    pub mean_loss: f64,
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Epoch number {}\nCurrent loss {}", self.epoch, self.loss)
    }
}

/// One optimisation step on a batch of pairs. Both sides of every pair go
/// through the network as a single `2B` batch (all `a`s, then all `b`s).
pub fn train_step(
    net: &mut SiameseNetwork,
    opt: &mut Sgd<f32>,
    a: &[&FaceImage],
    b: &[&FaceImage],
    labels: &[PairLabel],
    margin: f64,
) -> Result<f64> {
    if a.len() != b.len() || a.len() != labels.len() || a.is_empty() {
        return Err(SiameseError::InvalidArgument(format!(
            "pair batch sides disagree: {} / {} / {} labels",
            a.len(),
            b.len(),
            labels.len()
        )));
    }
    if net.mode() != TrainMode::Training {
        return Err(SiameseError::State("training step requires training mode".into()));
    }
    let n = a.len();
    let both: Vec<&FaceImage> = a.iter().chain(b).copied().collect();
    let x = images_to_tensor(&both)?;
    net.layers_mut().zero_grad();
    let y = net.forward(&x)?;
    let (ya, yb) = y.data().split_at(n * EMBEDDING_DIM);
    let batch = contrastive_batch(ya, yb, labels, EMBEDDING_DIM, margin)?;
    if !batch.loss.is_finite() {
        net.layers_mut().clear_trace();
        return Ok(batch.loss);
    }
    let mut grad = batch.grad_a;
    grad.extend_from_slice(&batch.grad_b);
    net.backward(&Tensor::new(vec![2 * n, EMBEDDING_DIM], grad)?)?;
    opt.step(&mut net.layers_mut().params_mut())?;
    Ok(batch.loss)
}

/// Trains `net` on freshly sampled pairs, `⌈|train|/batch⌉` batches per
/// epoch. `progress` sees each report as it is produced. The network is
/// left in evaluation mode.
pub fn train(
    net: &mut SiameseNetwork,
    train_set: &[FaceImage],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(SiameseError::InvalidArgument("training set is empty".into()));
    }
    let sampler = PairSampler::for_images(train_set);
    sampler.validate(config.genuine_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Sgd::new(config.learning_rate, config.momentum)?;
    let batches = config.batches_per_epoch(train_set.len());

    net.set_mode(TrainMode::Training);
    let result = (|| {
        let mut reports = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let mut sum = 0.0;
            let mut last = 0.0;
            for batch in 0..batches {
                let pairs = sampler.draw_many(config.batch_size, config.genuine_fraction, &mut rng)?;
                let a: Vec<&FaceImage> = pairs.iter().map(|p| &train_set[p.a]).collect();
                let b: Vec<&FaceImage> = pairs.iter().map(|p| &train_set[p.b]).collect();
                let labels: Vec<PairLabel> = pairs.iter().map(|p| p.label).collect();
                let loss = match train_step(net, &mut opt, &a, &b, &labels, config.margin) {
                    Err(SiameseError::Nn(crate::nn::NnError::NonFinite(_))) => f64::NAN,
                    other => other?,
                };
                if !loss.is_finite() {
                    return Err(SiameseError::NonFiniteLoss { epoch, batch, loss });
                }
                sum += loss;
                last = loss;
            }
            let report = EpochReport {
                epoch,
                loss: last,
                mean_loss: sum / batches as f64,
            };
            progress(&report);
            reports.push(report);
        }
        Ok(reports)
    })();
    net.set_mode(TrainMode::Evaluation);
    result
}
