//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Values live in plain row-major [`Tensor`]s. A [`Tape`] records every
//! operation applied to its [`Var`] handles and replays them in reverse to
//! produce gradients. Named parameters are held in a [`ParamStore`], whose
//! per-name trainable flags decide which leaves receive gradients.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod real;
mod store;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use real::Real;
pub use store::{GradMap, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
