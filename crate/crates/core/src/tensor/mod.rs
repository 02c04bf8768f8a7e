//! Dense f32 tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus a flat row-major `Vec<f32>`.
//! Differentiation happens on a [`Tape`](tape::Tape): values are pushed onto
//! the tape as leaves or as op outputs, `backward` walks the recorded ops in
//! reverse and accumulates gradients into each slot that requires them. A
//! tape lives for one forward/backward pass and is then dropped; long-lived
//! parameters are plain `Tensor`s that get re-bound onto a fresh tape every
//! step.

pub mod checkpoint;
pub mod kernels;
pub mod optim;
pub mod tape;

pub use optim::{AdamConfig, Optimizer, SgdConfig};
pub use tape::{BnMode, BnStats, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major f32 tensor.
///
/// `grad` is populated on tape-owned tensors by `Tape::backward`; detached
/// values carry `grad: None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "Tensor::new",
                expected: format!("{} elements for shape {:?}", numel, shape),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Identity matrix, used for position one-hot bases.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Normal samples with the given standard deviation (Box-Muller on the
    /// supplied RNG, so results are reproducible across platforms).
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push((r * th.cos()) as f32 * std);
            if data.len() < numel {
                data.push((r * th.sin()) as f32 * std);
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Single element of a scalar-shaped tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: format!("{} elements", self.data.len()),
                got: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The n×n identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Elementwise mean of a non-empty set of same-shaped tensors
    /// (accumulated in f64 in slice order, so the result is deterministic).
    pub fn mean_of(tensors: &[&Tensor]) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean_of: empty set".into()))?;
        let mut acc = vec![0.0f64; first.numel()];
        for t in tensors {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "mean_of",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            for (a, v) in acc.iter_mut().zip(&t.data) {
                *a += *v as f64;
            }
        }
        let inv = 1.0 / tensors.len() as f64;
        let data = acc.iter().map(|a| (a * inv) as f32).collect();
        Tensor::new(first.shape.clone(), data)
    }
}

/// He-style fan-in scaled normal initialization for conv / linear weights.
pub fn init_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    Tensor::randn(shape, std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_wrong_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        let a = Tensor::randn(&[32], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let b = Tensor::randn(&[32], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mean_of_single_tensor_is_identity_bitwise() {
        let t = Tensor::randn(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let m = Tensor::mean_of(&[&t]).unwrap();
        assert_eq!(m.data(), t.data());
    }

    #[test]
    fn mean_of_matches_elementwise_average() {
        let a = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let m = Tensor::mean_of(&[&a, &b]).unwrap();
        assert_eq!(m.data(), &[2.0, 1.0]);
    }
}
