//! Classification of scarcely observed multivariate trajectories with a
//! generative recurrent latent-state model.
//!
//! The pipeline is:
//!
//! 1. [`data`] turns long-format event records into a sparse
//!    patients × features × bins tensor with an observation mask, static
//!    covariates, labels and a stratified split.
//! 2. [`model`] fits a GRU whose hidden state generates both the observed
//!    trajectory and the class label. Missing inputs are filled with the
//!    network's own decoded predictions. A mean-imputed GRU baseline lives
//!    next to it.
//! 3. [`ensemble`] trains many models under sampled `(gamma, lambda)`,
//!    keeps the best by validation AUC and averages their probabilities.
//! 4. [`eval`] computes ROC curves and AUC.
//!
//! [`synthgen`] simulates the latent generative process with known
//! parameters and serves as an end-to-end oracle. [`ndiff`] is the small
//! reverse-mode differentiation engine everything trains on.

pub mod cli;
pub mod container;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod model;
pub mod ndiff;
pub mod synthgen;

pub use error::{Error, Result};
