//! Tensors, a reverse-mode graph, and PCA.

mod graph;
mod pca;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use pca::{pca_fit, symmetric_eigen, PcaBasis};
pub use tensor::Tensor;

use rand::Rng;

/// `rows × cols` matrix with entries uniform in `±√(6 / (rows + cols))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}
