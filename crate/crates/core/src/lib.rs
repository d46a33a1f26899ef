//! Quantum-inspired mechanism (QIM) for CNN image classification.
//!
//! Feature maps from a convolutional backbone are flattened into vectors,
//! turned into density matrices, convolved with learned kernels and reduced
//! by row and column max-pooling into a fixed-length feature vector.
//!
//! * [`tensor`], [`ops`], [`tape`]: tensors, differentiable ops, reverse mode
//! * [`density`]: dyads, mixtures and their validation
//! * [`qim`]: the QIM block, dense and fused kernels
//! * [`models`]: StandardCNN and LeNet-5 with an optional QIM stage
//! * [`data`]: IDX and CIFAR-10 loaders, seeded batching
//! * [`train`]: optimizers, training loop, evaluation, checkpoints
//! * [`gradcheck`]: finite-difference verification
//! * [`experiment`], [`cli`]: config files, reports and commands

pub mod cli;
pub mod data;
pub mod density;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod models;
pub mod ops;
pub mod qim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, DataError, Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
