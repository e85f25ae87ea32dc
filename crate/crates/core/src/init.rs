//! Seeded parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{numel, Param, Tensor};

/// Deterministic initializer. Each parameter draws from its own stream keyed
/// by its name, so two models sharing a parameter name get identical values
/// regardless of construction order.
#[derive(Debug, Clone)]
pub struct Init {
    seed: u64,
    /// Multiplier applied to every fan-in scaled draw.
    pub gain: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed, gain: 1.0 }
    }

    /// He-style normal draw with standard deviation `gain * scale * sqrt(2 / fan_in)`.
    pub fn he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, scale: f64) -> Param {
        let std = self.gain * scale * (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal(name, shape, std)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Param {
        let name = name.into();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        let dist = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let data = (0..numel(shape)).map(|_| dist.sample(&mut rng)).collect();
        Param::new(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Param {
        Param::new(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Param {
        Param::new(name, Tensor::full(shape, value))
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf29ce484222325, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_depend_on_name_not_order() {
        let mut a = Init::new(7);
        let mut b = Init::new(7);
        let _ = b.normal("other", &[3], 1.0);
        assert_eq!(a.normal("w", &[4], 1.0), b.normal("w", &[4], 1.0));
        assert_ne!(a.normal("w", &[4], 1.0), a.normal("v", &[4], 1.0));
    }
}
