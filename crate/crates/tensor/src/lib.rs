//! Minimal dense tensor algebra with tape-based reverse-mode
//! differentiation and a central-difference gradient oracle.
//!
//! Values are `f64`. A [`Graph`] records every operation in evaluation
//! order; [`Graph::backward`] sweeps it once in reverse. Parameters live in a
//! [`ParamStore`] and are bound into a graph as leaves; gradients accumulate
//! additively into the store until [`ParamStore::zero_grad`] is called.

mod error;
mod graph;
mod params;
mod tensor;

pub mod check;

pub use error::{Result, TensorError};
pub use graph::{logsumexp, sigmoid, softplus, Gradients, Graph, Unary, Var, NORM_EPS, VAR_EPS};
pub use params::{ParamEntry, ParamGroup, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
