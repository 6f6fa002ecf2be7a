//! Dense tensors, reverse-mode autodiff, gradient checking and the portable
//! weight file.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;
pub mod weights;

pub use gradcheck::{grad_check, grad_check_multi};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::{numel, Tensor};
pub use weights::WeightFile;

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Pairwise (cascade) summation. The result depends only on the order of
/// `values`, never on how work was split across threads.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
