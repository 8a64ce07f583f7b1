//! Dense tensors, a reverse-mode tape, and gradient validation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, FdConfig, FdProbe, FdReport};
pub use tape::{Gradients, Mode, ParamId, Tape, Var};
pub use tensor::Tensor;


/// Default epsilon for cosine similarity and layer normalization.
pub const DEFAULT_EPS: f64 = 1e-8;

/// `a·b / (max(‖a‖, eps) · max(‖b‖, eps))`. A zero vector yields 0.
pub fn cosine_similarity(a: &[f64], b: &[f64], eps: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity: length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    dot / (na * nb)
}
