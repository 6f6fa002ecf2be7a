#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinforensics::numerics::{Graph, Tensor, Var};
use swinforensics::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, seed)
}

/// Contracts `y` against fixed random weights so every output coordinate
/// contributes a distinct amount to the scalar.
pub fn probe<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = uniform(&y.shape(), 0.5, 1.5, seed ^ 0x9e37);
    y.mul(g.constant(y.shape(), w.to_vec())?)?.sum()
}
