//! Tape-based reverse-mode automatic differentiation for the small dense
//! networks used in this workspace.
//!
//! A [`Graph`] is built fresh for each forward pass. Every operation appends a
//! node holding its value and enough cached state to run its backward rule.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Grads`]
//! table. Parameters live outside the graph in a [`ParamStore`] and are
//! copied in as leaves by [`ParamStore::bind`].
//!
//! Everything is generic over [`Scalar`] (`f32` and `f64`) so the same model
//! code can train in single precision and be gradient-checked in double.

mod gemm;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{AttentionShape, Grads, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
