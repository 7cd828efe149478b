use super::layers::Cache;
use super::{Float, Layer, NnError, Result, Tensor, TrainMode};

struct Trace<T> {
    mode: TrainMode,
    /// Input of every layer, in order.
    inputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

/// Ordered stack of layers with trace-based reverse mode.
///
/// [`Sequential::forward`] records every layer's input; [`Sequential::backward`]
/// consumes that trace, accumulating parameter gradients and returning the
/// gradient with respect to the network input.
pub struct Sequential<T: Float> {
    layers: Vec<Layer<T>>,
    trace: Option<Trace<T>>,
}

impl<T: Float> Clone for Sequential<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            trace: None,
        }
    }
}

impl<T: Float> std::fmt::Debug for Sequential<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.layers.iter().map(|l| l.to_string()))
            .finish()
    }
}

impl<T: Float> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers, trace: None }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Traced forward pass.
    pub fn forward(&mut self, x: &Tensor<T>, mode: TrainMode) -> Result<Tensor<T>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (out, cache) = layer.forward_traced(&cur, mode)?;
            inputs.push(std::mem::replace(&mut cur, out));
            caches.push(cache);
        }
        self.trace = Some(Trace { mode, inputs, caches });
        Ok(cur)
    }

    /// Untraced evaluation-mode pass; never mutates the network.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur)?;
        }
        Ok(cur)
    }

    /// Back-propagates `grad_output` (∂loss/∂output) through the last
    /// recorded forward pass.
    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let trace = self.trace.take().ok_or_else(|| {
            NnError::State("backward called without a recorded forward pass".into())
        })?;
        let mut grad = grad_output.clone();
        for ((layer, input), cache) in self
            .layers
            .iter_mut()
            .zip(&trace.inputs)
            .zip(&trace.caches)
            .rev()
        {
            grad = layer.backward(input, cache, trace.mode, grad)?;
        }
        Ok(grad)
    }

    pub fn has_trace(&self) -> bool {
        self.trace.is_some()
    }

    pub fn clear_trace(&mut self) {
        self.trace = None;
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
