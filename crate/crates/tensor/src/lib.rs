//! Minimal reverse-mode automatic differentiation over dense CPU tensors.
//!
//! Tensors are contiguous and row-major. Operations record a backward closure
//! only when some input requires a gradient. Matrix products and convolutions
//! go through `matrixmultiply`.

mod activation;
mod conv;
mod float;
pub mod gradcheck;
mod linalg;
pub mod nn;
mod ops;
pub mod optim;
mod tensor;
mod var;

pub use conv::Conv2dGeometry;
pub use float::Float;
pub use tensor::{BackwardCtx, Gradients, Tensor};
pub use var::{Fnv64, Init, LoadError, Var, VarStore};
