//! Small-scale video deepfake detection: a reverse-mode tensor engine, the
//! R(2+1)D and factorised-encoder ViViT classifiers built on it, and the
//! data pipeline and training harness that exercise them on CPU.

pub mod data;
pub mod harness;
pub mod models;
pub mod nn;
pub mod optim;
pub mod tensor;

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Optim(#[from] optim::OptimError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
}
