use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::scalar::Real;

use super::tensor::Tensor;

/// Stochastic gradient descent with classical momentum and decoupled-style
/// L2 weight decay folded into the gradient. Velocity is keyed by tensor id,
/// so a parameter keeps its state across steps as long as the same tensor
/// object is passed in.
pub struct Sgd<T: Real> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: HashMap<u64, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Apply one update to every parameter and clear its gradient.
    /// Every tensor must carry a gradient; a missing one is reported by
    /// position so callers can name the offending parameter.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        for (index, p) in params.iter().enumerate() {
            if p.grad_vec().is_none() {
                return Err(CoreError::MissingGradient { index });
            }
        }
        for p in params {
            let grad = p.grad_vec().expect("checked above");
            let mut data = p.data_vec();
            let vel = self
                .velocity
                .entry(p.id())
                .or_insert_with(|| vec![T::zero(); data.len()]);
            for i in 0..data.len() {
                let g = grad[i] + self.weight_decay * data[i];
                vel[i] = self.momentum * vel[i] + g;
                data[i] = data[i] - self.lr * vel[i];
            }
            p.set_data(data)?;
            p.clear_grad();
        }
        Ok(())
    }
}
