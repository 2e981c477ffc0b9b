//! Dense `f64` numerics: tensors, a reverse-mode tape, Adam and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, tape_objective};
pub use tape::{log_sum_exp, softmax_in_place, SparseMatrix, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;

/// Counter-based generator used for every stochastic operation.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("index error: {0}")]
    Index(String),
}
