//! Hierarchical graph classification with transformer-based node-dropping
//! pooling.
//!
//! The crate is layered bottom-up:
//!
//! - [`numcore`]: dense `f64` matrices, a tape-based reverse-mode autodiff
//!   engine, Adam, a seedable PRNG and a finite-difference gradient checker.
//! - [`graphio`]: TUDataset parsing, node features, stratified folds,
//!   mini-batches and Erdős–Rényi generators.
//! - [`sampler`]: parameter-free node selection from a score vector
//!   (roulette wheel, its nearest-CDF variant, and top-K).
//! - [`gnn`]: the GCN layer and mean‖max readout.
//! - [`gtpool`]: the pooling layer (attention scoring, sampling, coarsening).
//! - [`model`]: the hierarchical classifier and its checkpoint format.
//! - [`trainer`]: k-fold cross-validation, early stopping and sweeps.

pub mod error;
pub mod gnn;
pub mod graphio;
pub mod gtpool;
pub mod model;
pub mod numcore;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
