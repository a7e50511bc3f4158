//! Minibatch SGD with classical momentum.

use crate::error::{Error, Result};

use super::Tensor;

/// `v <- momentum * v + grad; p <- p - lr * v`, then gradients are zeroed.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer was initialized for {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::Usage("sgd step with missing gradient".into()))?;
            for ((pv, vv), g) in p.data.iter_mut().zip(v.iter_mut()).zip(grad) {
                *vv = self.momentum * *vv + *g;
                *pv -= self.lr * *vv;
            }
        }
        for p in params.iter_mut() {
            p.zero_grad();
        }
        Ok(())
    }
}
