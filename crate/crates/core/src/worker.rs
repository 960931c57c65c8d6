//! Worker state machines.
//!
//! A worker alternates between [`WorkerState::compute_step`], which turns a
//! minibatch gradient into an upward sparse message, and
//! [`WorkerState::apply_downward`], which adds the server's model delta to the
//! local model. Upward messages always carry learning-rate-scaled values, so the
//! server never needs to know which strategy produced them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{dgc_correction_step, momentum_step, samomentum_step, Hyperparams, VelocityState};
use crate::sparsify::{check_momentum, split_residual, SparsifyConfig};
use crate::tasks::Task;
use crate::tensor::{decode, encode, ParamVector, SparseUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Full update every step; classical momentum when `m > 0`.
    Dense,
    /// Gradient dropping with local residual accumulation.
    Residual,
    /// Local velocity plus residual accumulation of the velocity.
    Dgc,
    /// Sparsification-aware momentum, no residual.
    SaMomentum,
}

#[derive(Debug, Clone, PartialEq)]
enum Strategy {
    Dense {
        velocity: VelocityState,
    },
    Residual {
        residual: ParamVector,
    },
    Dgc {
        velocity: VelocityState,
        residual: ParamVector,
    },
    SaMomentum {
        velocity: VelocityState,
    },
}

/// Per-worker shuffled passes over the training set.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    /// Seed derivation shared by the simulator and anyone replaying it.
    pub fn for_worker(n: usize, run_seed: u64, worker: u32) -> Self {
        Self::new(n, run_seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(worker as u64 + 1)))
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        let size = size.min(n);
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == n {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - batch.len()).min(n - self.cursor);
            batch.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        batch
    }
}

#[derive(Debug, Clone)]
pub struct WorkerState {
    id: u32,
    theta: ParamVector,
    strategy: Strategy,
    hp: Hyperparams,
    cfg: SparsifyConfig,
    step: u64,
    sampler: BatchSampler,
}

impl WorkerState {
    pub fn new(
        id: u32,
        theta0: ParamVector,
        kind: StrategyKind,
        hp: Hyperparams,
        cfg: SparsifyConfig,
        sampler: BatchSampler,
    ) -> Result<Self> {
        hp.validate()?;
        let zeros = ParamVector::zeros(theta0.partition().clone());
        let strategy = match kind {
            StrategyKind::Dense => Strategy::Dense {
                velocity: VelocityState::zeros_like(&theta0),
            },
            StrategyKind::Residual => Strategy::Residual { residual: zeros },
            StrategyKind::Dgc => Strategy::Dgc {
                velocity: VelocityState::zeros_like(&theta0),
                residual: zeros,
            },
            StrategyKind::SaMomentum => {
                check_momentum(hp.momentum)?;
                Strategy::SaMomentum {
                    velocity: VelocityState::zeros_like(&theta0),
                }
            }
        };
        Ok(Self {
            id,
            theta: theta0,
            strategy,
            hp,
            cfg,
            step: 0,
            sampler,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn model(&self) -> &ParamVector {
        &self.theta
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn kind(&self) -> StrategyKind {
        match self.strategy {
            Strategy::Dense { .. } => StrategyKind::Dense,
            Strategy::Residual { .. } => StrategyKind::Residual,
            Strategy::Dgc { .. } => StrategyKind::Dgc,
            Strategy::SaMomentum { .. } => StrategyKind::SaMomentum,
        }
    }

    /// Local gradient-dropping residual, for strategies that keep one.
    pub fn residual(&self) -> Option<&ParamVector> {
        match &self.strategy {
            Strategy::Residual { residual } | Strategy::Dgc { residual, .. } => Some(residual),
            _ => None,
        }
    }

    pub fn velocity(&self) -> Option<&ParamVector> {
        match &self.strategy {
            Strategy::Dense { velocity } | Strategy::Dgc { velocity, .. } | Strategy::SaMomentum { velocity } => {
                Some(&velocity.velocity)
            }
            Strategy::Residual { .. } => None,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        self.sampler.next_batch(size)
    }

    /// Computes the local gradient on `batch` and produces the upward message.
    pub fn compute_step(&mut self, task: &dyn Task, batch: &[usize], epoch: usize) -> Result<SparseUpdate> {
        let diverged = Error::Diverged {
            worker: self.id,
            step: self.step,
        };
        let grad = task.grad(&self.theta, batch).map_err(|_| diverged.clone())?;
        let hp = self.hp.at_epoch(epoch);
        let upward = self.upward(&grad, &hp).map_err(|e| match e {
            Error::NumericOverflow { .. } => diverged,
            other => other,
        })?;
        self.step += 1;
        Ok(upward.with_header(self.id, self.step))
    }

    /// Strategy transition on an explicit gradient.
    pub fn upward(&mut self, grad: &ParamVector, hp: &Hyperparams) -> Result<SparseUpdate> {
        let cfg = self.cfg;
        match &mut self.strategy {
            Strategy::Dense { velocity } => {
                let (next, u) = momentum_step(velocity, grad, hp)?;
                *velocity = next;
                let all = SparsifyConfig::dense();
                Ok(split_residual(&u, &all).0)
            }
            Strategy::Residual { residual } => {
                let lr = hp.learning_rate;
                let accumulated = residual.zip_map(grad, |v, g| v + lr * g)?;
                let (sent, rest) = split_residual(&accumulated, &cfg);
                *residual = rest;
                Ok(sent)
            }
            Strategy::Dgc { velocity, residual } => {
                let (next, rest, sent) = dgc_correction_step(velocity, residual, grad, hp, &cfg)?;
                *velocity = next;
                *residual = rest;
                Ok(sent)
            }
            Strategy::SaMomentum { velocity } => {
                let (next, sent) = samomentum_step(velocity, grad, hp, &cfg)?;
                *velocity = next;
                Ok(sent)
            }
        }
    }

    /// Upward message on the wire.
    pub fn compute_encoded(&mut self, task: &dyn Task, batch: &[usize], epoch: usize) -> Result<Vec<u8>> {
        Ok(encode(&self.compute_step(task, batch, epoch)?))
    }

    /// `θ ← θ + G`.
    pub fn apply_downward(&mut self, delta: &SparseUpdate) -> Result<()> {
        self.theta.apply_sparse(delta, 1.0)
    }

    pub fn apply_encoded(&mut self, bytes: &[u8]) -> Result<()> {
        let delta = decode(bytes, self.theta.len())?;
        self.apply_downward(&delta)
    }
}
