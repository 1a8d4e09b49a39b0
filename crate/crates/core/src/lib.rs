//! Toolkit for benchmarking hyperparameter optimization in federated learning.
//!
//! The crate simulates federated courses, charges them against a simulated
//! wall-clock budget, serves evaluations from raw training, lookup tables or
//! surrogate models, and runs HPO methods and studies on top of them.

pub mod analysis;
pub mod backends;
pub mod dataflow;
pub mod engine;
pub mod error;
pub mod fedex;
pub mod optimizers;
pub mod rng;
pub mod space;
pub mod sysmodel;

pub use error::{Error, Result};
