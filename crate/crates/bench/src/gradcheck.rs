//! Finite-difference checks of the shipped tasks.

use std::sync::Arc;

use clap::ValueEnum;
use dgs_core::tasks::{
    gradcheck, random_params, Activation, LogisticTask, MlpTask, PerturbedGradient, QuadraticBowl, SyntheticDataset,
    Task,
};
use dgs_core::worker::BatchSampler;

use crate::error::Result;

pub const TOLERANCE: f64 = 1e-6;
pub const STEP: f64 = 1e-5;
pub const POINTS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskName {
    Quadratic,
    Logistic,
    MlpTanh,
    MlpSigmoid,
    MlpRelu,
}

impl TaskName {
    pub fn build(self, seed: u64) -> Result<Box<dyn Task>> {
        let blobs = || SyntheticDataset::gaussian_blobs(6, 64, 2.0, seed).map(Arc::new);
        let mlp = |act| -> Result<Box<dyn Task>> { Ok(Box::new(MlpTask::new(vec![6, 8, 2], act, blobs()?, seed)?)) };
        Ok(match self {
            TaskName::Quadratic => Box::new(QuadraticBowl::random(20, seed)?),
            TaskName::Logistic => Box::new(LogisticTask::new(blobs()?)?),
            TaskName::MlpTanh => mlp(Activation::Tanh)?,
            TaskName::MlpSigmoid => mlp(Activation::Sigmoid)?,
            TaskName::MlpRelu => mlp(Activation::Relu)?,
        })
    }
}

/// Max relative error at each of [`POINTS`] random `(θ, batch)` pairs.
pub fn check_task(task: &dyn Task, seed: u64) -> Result<Vec<f64>> {
    let mut sampler = BatchSampler::new(task.train_len(), seed);
    (0..POINTS)
        .map(|i| {
            let theta = random_params(task.partition(), 1.0, seed.wrapping_mul(31).wrapping_add(i));
            let batch = sampler.next_batch(task.train_len().min(8));
            Ok(gradcheck(task, &theta, &batch, STEP)?)
        })
        .collect()
}

/// Checks `name`; `perturb` adds a constant to one gradient component as a negative control.
pub fn check(name: TaskName, seed: u64, perturb: bool) -> Result<Vec<f64>> {
    let task = name.build(seed)?;
    if perturb {
        check_task(
            &PerturbedGradient {
                inner: task,
                offset: 1e-3,
            },
            seed,
        )
    } else {
        check_task(task.as_ref(), seed)
    }
}
