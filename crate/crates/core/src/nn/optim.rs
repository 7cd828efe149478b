use super::{Float, NnError, Result, Tensor};

/// Stochastic gradient descent with classical momentum:
/// `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Float> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(NnError::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(NnError::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Applies one update to every parameter with a gradient. Parameters are
    /// left untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(NnError::NonFinite(format!(
                        "gradient of parameter {i} at element {pos}"
                    )));
                }
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let lr = T::lit(self.lr);
        let mu = T::lit(self.momentum);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let (data, grad) = p.data_and_grad();
            let Some(grad) = grad else { continue };
            if v.len() != data.len() {
                return Err(NnError::State("optimizer state does not match parameter extents".into()));
            }
            for ((w, vel), &g) in data.iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = mu * *vel + g;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}
