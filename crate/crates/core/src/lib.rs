//! Federated sigmoidal Gaussian Cox processes.
//!
//! Each client fits a sparse-GP intensity `m * sigmoid(f(t))` with a deep RBF
//! kernel using Pólya-Gamma augmented mean-field updates plus reparameterised
//! gradient steps on a Gaussian over kernel parameters. A server aggregates
//! the clients' Gaussians into a shared prior under FedAvg, KL,
//! Wasserstein-2 or MMD.

pub mod aggregation;
pub mod cli;
pub mod client;
pub mod dataio;
pub mod error;
pub mod kernel;
pub mod numeric;
pub mod orchestrator;
pub mod seed;

pub use error::{Error, Result};
