//! Low-rank adapters: a frozen base matrix `W0` (d×k) plus a trainable
//! product `B A` with `B` d×r and `A` r×k.
//!
//! The forward pass is `W0 x + B (A x)`. The product `B A` is never formed;
//! the rank-`r` bottleneck keeps the extra cost at `r (d + k)` per input.
//! No scaling factor is applied to the low-rank branch.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Standard deviation of the Gaussian used for `A`.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoraError {
    #[error("rank {rank} must be between 1 and min(d, k) = {max}")]
    InvalidRank { rank: usize, max: usize },
    #[error("input has length {got}, adapter expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub fn check_rank(d: usize, k: usize, rank: usize) -> Result<(), LoraError> {
    let max = d.min(k);
    if rank == 0 || rank > max {
        return Err(LoraError::InvalidRank { rank, max });
    }
    Ok(())
}

/// Gaussian `A` (r×k) from `seed`; the same seed always yields the same bits.
pub fn init_a(rank: usize, k: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, LORA_INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((rank, k), || normal.sample(&mut rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// Name of the adapted weight, e.g. `touch.layer0.attn.q`.
    pub target: String,
    pub base: Array2<f64>,
    pub b: Array2<f64>,
    pub a: Array2<f64>,
    pub rank: usize,
}

impl LoraAdapter {
    /// Wraps `base` with a fresh adapter: seeded `A`, zero `B`.
    pub fn init(
        target: impl Into<String>,
        base: Array2<f64>,
        rank: usize,
        seed: u64,
    ) -> Result<Self, LoraError> {
        let (d, k) = base.dim();
        check_rank(d, k, rank)?;
        Ok(Self {
            target: target.into(),
            a: init_a(rank, k, seed),
            b: Array2::zeros((d, rank)),
            base,
            rank,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, LoraError> {
        if x.len() != self.in_dim() {
            return Err(LoraError::DimensionMismatch {
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        let bottleneck = self.a.dot(&x);
        Ok(self.base.dot(&x) + self.b.dot(&bottleneck))
    }

    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Convenience form: `W0 x + B (A x)` for an adapter.
pub fn lora_forward(adapter: &LoraAdapter, x: ArrayView1<f64>) -> Result<Array1<f64>, LoraError> {
    adapter.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_example() {
        let adapter = LoraAdapter {
            target: "t".into(),
            base: Array2::eye(2),
            b: array![[1.0], [2.0]],
            a: array![[3.0, 4.0]],
            rank: 1,
        };
        assert_eq!(lora_forward(&adapter, array![1.0, 1.0].view()).unwrap(), array![8.0, 15.0]);
    }

    #[test]
    fn zero_b_is_base_map() {
        let base = Array2::from_shape_fn((8, 8), |(i, j)| (i as f64 - j as f64) * 0.25);
        let adapter = LoraAdapter::init("t", base.clone(), 4, 7).unwrap();
        let x = Array1::from_shape_fn(8, |i| i as f64 * 0.5 - 1.0);
        assert_eq!(adapter.forward(x.view()).unwrap(), base.dot(&x));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = LoraAdapter::init("t", Array2::zeros((8, 8)), 4, 99).unwrap();
        let b = LoraAdapter::init("t", Array2::zeros((8, 8)), 4, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.a.iter().any(|&v| v != 0.0));
        assert!(a.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_bounds() {
        assert!(LoraAdapter::init("t", Array2::zeros((6, 4)), 4, 0).is_ok());
        assert_eq!(
            LoraAdapter::init("t", Array2::zeros((6, 4)), 5, 0).unwrap_err(),
            LoraError::InvalidRank { rank: 5, max: 4 }
        );
        assert!(LoraAdapter::init("t", Array2::zeros((6, 4)), 0, 0).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let a = LoraAdapter::init("t", Array2::zeros((3, 2)), 1, 0).unwrap();
        assert!(a.forward(array![1.0, 2.0, 3.0].view()).is_err());
    }
}
