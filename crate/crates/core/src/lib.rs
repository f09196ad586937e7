//! Differentially private training with low-rank and sparse gradient updates.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense row-major matrices, Gram–Schmidt, seeded Gaussian sampling.
//! - [`model`]: a small dense/conv network with per-sample backpropagation.
//! - [`reparam`]: single-step power-method factorisation `W ≈ L R` and the
//!   projections between weight-space and factor-space gradients.
//! - [`sparsity`]: row/column importance, top-k unit selection and factor masking.
//! - [`privacy`]: per-sample clipping and masked Gaussian noise.
//! - [`accountant`]: Rényi-DP accounting for Poisson-subsampled Gaussian releases.
//! - [`trainer`]: the per-step training loop for every supported method.
//! - [`data`]: IDX / CIFAR-10 / CSV loaders, synthetic blobs and Poisson sampling.
//! - [`experiment`]: config files, run manifests, metrics CSVs, sweeps and inspection.

pub mod accountant;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod privacy;
pub mod reparam;
pub mod sparsity;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{Matrix, RngState};
