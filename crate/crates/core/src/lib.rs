//! Asynchronous parameter-server training with dual-way gradient sparsification.
//!
//! Workers send top-k sparsified, learning-rate-scaled updates; the server keeps
//! the accumulated model difference and answers each worker with the part of it
//! that worker has not yet seen, optionally top-k compressed as well. Momentum
//! variants live in [`optim`]; [`sim`] drives everything under simulated
//! asynchrony.

pub mod error;
pub mod optim;
pub mod server;
pub mod sim;
pub mod sparsify;
pub mod tasks;
pub mod tensor;
pub mod worker;

pub use error::{Error, Result};
pub use optim::{Hyperparams, VelocityState};
pub use server::{Exchange, ServerState};
pub use sim::{DelayModel, LinkModel, MetricsRecord, SimConfig, Simulation};
pub use sparsify::SparsifyConfig;
pub use tasks::{Evaluation, Split, Task};
pub use tensor::{LayerPartition, ParamVector, SparseUpdate};
pub use worker::{StrategyKind, WorkerState};
