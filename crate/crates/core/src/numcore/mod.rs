//! Numeric substrate: dense tensors, reverse-mode autodiff, Adam and a
//! seedable generator.

mod adam;
pub mod gradcheck;
mod params;
mod rng;
mod sparse;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
