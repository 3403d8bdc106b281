//! Deterministic numerical core: dense and sparse matrices, a reverse-mode
//! tape, Adam, seeded randomness and a finite-difference oracle.

mod adam;
mod gradcheck;
mod matrix;
mod rng;
pub mod sparse;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use matrix::DenseMatrix;
pub use rng::{gumbel_from_uniform, sample_gumbel, Rng, Stream, RNG_ALGORITHM};
pub use sparse::{spmm, SparseAdj};
pub use tape::{GradFault, Grads, ParamId, ParamStore, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    Argument(String),
}
