//! certitrain: certified robust training for small feed-forward networks.
//!
//! The engine trains classifiers that are provably robust to l-infinity
//! perturbations by descending a weighted combination of two objectives: an
//! adversarial cross-entropy (FGSM/PGD points) and a sound interval-bound
//! upper bound on the robust loss. The combination weights are recomputed
//! every step from first and second moment estimates of the two gradient
//! streams, so neither objective has to be hand-balanced.

pub mod attack;
pub mod bounds;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod joint;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CertError, Result};
