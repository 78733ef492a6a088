//! Data-free model merging over safetensors-compatible checkpoints.
//!
//! The centrepiece is STAR: every task-vector matrix is truncated in its
//! spectral space to the rank that holds a chosen share of its singular-value
//! mass, the kept singular values are rescaled to restore the original
//! nuclear norm, and the processed task vectors are averaged. Simple
//! averaging, task arithmetic, TIES and DARE are provided as baselines.

pub mod cli;
pub mod error;
pub mod harness;
pub mod merge;
pub mod prf;
pub mod spectral;
pub mod tensorstore;

pub use error::{Error, ErrorKind, Result};
