//! Config-driven experiment runner for the `dgs-core` simulator.

pub mod compare;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod plot;
pub mod runner;

pub use config::{ExperimentConfig, Method, TaskSpec};
pub use error::{BenchError, Result};
pub use runner::Summary;
