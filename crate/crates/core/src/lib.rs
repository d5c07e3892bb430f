//! CRATE-α: a white-box vision transformer whose layers are unrolled
//! optimization steps on the sparse rate reduction objective.
//!
//! Modules, bottom-up:
//! - [`numerics`]: dense matrices and a reverse-mode tape
//! - [`oracle`]: coordinate-descent LASSO and finite-difference references
//! - [`srr`]: coding rates and their closed-form gradients
//! - [`layers`]: MSSA, ISTA, ISTA-OC and ODL blocks
//! - [`model`]: configuration, parameter accounting, init and forward pass
//! - [`optim`]: AdamW, warmup + cosine schedule, smoothed cross-entropy
//! - [`data`]: CIFAR-10 binary reader and a union-of-subspaces generator
//! - [`container`]: the tensor file format shared by checkpoints and exports

pub mod container;
pub mod data;
mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod oracle;
pub mod srr;

pub use error::{Error, Result};
pub use numerics::{Matrix, Precision, Scalar};
