//! Seeded parameter initialisation.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{numel, Tensor};

/// Deterministic sampler used for parameter initialisation and synthetic
/// data. Normal draws use the Box-Muller transform.
pub struct Sampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Normal with standard deviation `std`, redrawn outside two deviations.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn trunc_normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let data: Vec<f64> = (0..numel(shape)).map(|_| self.trunc_normal(std)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape from caller")
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let data: Vec<f64> = (0..numel(shape)).map(|_| self.normal() * std).collect();
        Tensor::new(shape.to_vec(), data).expect("shape from caller")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_stays_within_two_std() {
        let mut s = Sampler::new(7);
        for _ in 0..10_000 {
            assert!(s.trunc_normal(0.02).abs() <= 0.04);
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let a: Vec<f64> = {
            let mut s = Sampler::new(3);
            (0..16).map(|_| s.normal()).collect()
        };
        let mut s = Sampler::new(3);
        let b: Vec<f64> = (0..16).map(|_| s.normal()).collect();
        assert_eq!(a, b);
    }
}
