//! Synthetic distribution-shift datasets.
//!
//! Two generators are provided:
//!
//! - [`gen_spurious_dataset`] keeps a base graph's structure, labels and
//!   features and appends domain-specific spurious features produced by a
//!   frozen random graph convolution of `[onehot(y) ∥ onehot(domain)]`.
//! - [`gen_planted_dataset`] samples stochastic-block-model environments
//!   with stable features whose class means never change and spurious
//!   features whose class-to-mean map is permuted per environment.

mod planted;
mod probe;
mod spurious;

use crate::graphio::GraphError;
use crate::numcore::NumError;

pub use planted::{gen_planted_dataset, planted_truth, PlantedConfig, PlantedTruth};
pub use probe::LinearProbe;
pub use spurious::{gen_spurious_dataset, SpuriousGenConfig};

/// Train / valid / test-ID ratios of the standard protocol.
pub const STANDARD_SPLIT: (f64, f64, f64) = (0.5, 0.25, 0.25);

#[derive(Debug, thiserror::Error)]
pub enum ShiftError {
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Num(#[from] NumError),
}
