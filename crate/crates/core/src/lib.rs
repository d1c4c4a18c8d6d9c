//! Data-free meta-learning from a pool of pre-trained classifiers.
//!
//! Pseudo-tasks are recovered from each frozen teacher by model inversion,
//! teachers are embedded in task space through a diagonal Fisher
//! information under a shared probe, grouped by spectral clustering on
//! their dissimilarity, and a meta-model is trained with a
//! gradient-alignment regularized update plus replay episodes.

pub mod autograd;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod grouping;
pub mod inversion;
pub mod io;
pub mod meta;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
