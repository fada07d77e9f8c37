//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] sweeps the
//! tape once from a scalar. Parameters live in a [`ParamStore`] and enter a
//! graph through [`Graph::param`].

pub mod check;
mod graph;
mod lomb;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use graph::{CustomOp, Grads, Graph, Unary, Var};
pub use lomb::LombScargleOp;
pub use optim::{Adam, AdamConfig};
pub use params::{load_checkpoint, save_checkpoint, Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;
