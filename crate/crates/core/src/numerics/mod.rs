//! Minimal dense-tensor engine with reverse-mode differentiation, an Adam
//! optimizer, checkpoint I/O and a finite-difference gradient checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input to {0}")]
    NonFiniteInput(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}
