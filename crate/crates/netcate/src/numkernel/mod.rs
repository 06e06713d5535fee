//! Minimal differentiable numeric kernel.
//!
//! Dense matrices are [`ndarray::Array2<f64>`] in standard (row-major)
//! layout. Sparse operands are [`CsrMatrix`]. All differentiable computation
//! is recorded on a [`Tape`] and differentiated in reverse with
//! [`Tape::backward`]; [`gradcheck`] provides the finite-difference harness
//! that every operation and loss in this crate is checked against.

mod csr;
pub mod gradcheck;
mod tape;

pub use csr::CsrMatrix;
pub use tape::{Gradients, NodeId, Tape};

/// Dense row-major matrix of f64. All computation in this crate is 64-bit.
pub type Matrix = ndarray::Array2<f64>;

/// Builds a column vector (n×1 matrix) from a slice.
pub fn column(values: &[f64]) -> Matrix {
    Matrix::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

/// Entrywise ELU: x if x > 0, exp(x) − 1 otherwise.
pub fn elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}
