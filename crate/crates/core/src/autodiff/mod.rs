//! Reverse-mode differentiation over dense matrices.
//!
//! The engine records exactly the primitives the network needs: elementwise
//! arithmetic, matrix products, activations, gather/scatter between edges and
//! atoms, and the block-wise vector/tensor operations (dyadic products,
//! symmetrization, traceless projection, norms, traces) that act on the
//! geometric channels.

mod matrix;
mod tape;

pub use matrix::{matmul, Matrix, Real};
pub use tape::{Gradients, Tape, Var};
