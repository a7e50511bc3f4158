//! Dense double-precision tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value type (row-major `f64` buffer plus shape) used
//! for parameters, datasets and results. Differentiable computation happens
//! on a [`Tape`]: each forward op appends a node, `backward` walks the nodes
//! in exact reverse order, so gradient accumulation is deterministic.

mod optim;
mod tape;

pub use optim::Sgd;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| gauss(rng) * std).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Add `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor numel {}",
                g.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += *b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Box–Muller transform; two uniform draws per normal sample.
fn gauss(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub(crate) fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad.as_deref().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad.as_deref().unwrap(), &[0.0; 3]);
    }
}
