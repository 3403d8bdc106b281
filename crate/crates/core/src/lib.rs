//! Out-of-distribution node classification with pseudo-environment
//! mixture-of-expert graph networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`numcore`]: matrices, CSR kernels, the gradient tape, Adam, RNG.
//! - [`graphio`]: graph container, text formats, normalization, splits.
//! - [`shiftgen`]: synthetic distribution-shift datasets.
//! - [`model`]: CaNet (MoE-GCN / MoE-GAT) and plain GCN/GAT baselines.
//! - [`trainer`]: the regularized objective, training loop and sweeps.
//! - [`metrics`]: accuracy, macro-F1, ROC-AUC and evaluation reports.
//! - [`cli`]: the `canet` command-line front end.

pub mod numcore;
pub mod graphio;
pub mod metrics;
pub mod model;
pub mod shiftgen;
pub mod trainer;
pub mod cli;
