//! Three-level sparsification of LSTM networks: weights, gates and
//! neurons, by Bayesian sparsification or group Lasso pruning.
//!
//! The guide in `book/` walks through the concepts; its snippets run as
//! doc-tests of this crate.

pub mod analyze;
pub mod autodiff;
pub mod bayes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Random generator used for every seeded operation.
pub type SeededRng = rand_chacha::ChaCha8Rng;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/sparsity-levels.md")]
    pub struct SparsityLevels;
    #[doc = include_str!("../../../book/src/group-weights.md")]
    pub struct GroupWeights;
    #[doc = include_str!("../../../book/src/bayesian.md")]
    pub struct Bayesian;
    #[doc = include_str!("../../../book/src/pruning.md")]
    pub struct Pruning;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/analysis.md")]
    pub struct Analysis;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
