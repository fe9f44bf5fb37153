//! Sequential models with a reverse-mode tape.
//!
//! Parameters live outside the model as a flat `Vec<Tensor>` in the order
//! given by [`Model::param_specs`]. A forward pass records a [`Tape`];
//! [`Model::backward`] consumes it with a loss-scale seed and returns
//! [`Gradients`] in the storage dtype of the [`Precision`] used.

mod checkpoint;
mod gradcheck;
mod model;
mod ops;
mod spec;

use std::fmt;

use crate::tensor::{AccumMode, DType, Tensor};

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, reference_loss, GradCheckReport};
pub use model::{Gradients, Model, ParamSpec, SavedTensor, SideBand, Tape};
pub use spec::LayerSpec;

/// Storage dtype for every stored tensor plus the dot-product accumulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Precision {
    pub storage: DType,
    pub accum: AccumMode,
}

impl Precision {
    pub const FP32: Precision = Precision { storage: DType::F32, accum: AccumMode::Acc32 };
    pub const MIXED: Precision = Precision { storage: DType::F16, accum: AccumMode::Acc32 };

    pub fn new(storage: DType, accum: AccumMode) -> Precision {
        Precision { storage, accum }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.storage, self.accum)
    }
}

/// Supervision for the loss layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One class index per sample, for softmax cross-entropy.
    Classes(Vec<usize>),
    /// Regression targets with the same element count as the prediction.
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The targets of the samples at `indices`.
    pub fn gather(&self, indices: &[usize]) -> crate::Result<Targets> {
        match self {
            Targets::Classes(c) => {
                let picked = indices
                    .iter()
                    .map(|&i| c.get(i).copied().ok_or_else(|| crate::Error::shape(format!("target {i} out of bounds"))))
                    .collect::<crate::Result<_>>()?;
                Ok(Targets::Classes(picked))
            }
            Targets::Values(t) => Ok(Targets::Values(t.gather_rows(indices)?)),
        }
    }
}

/// Training mode uses and updates batch statistics; evaluation uses running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
