//! Parameter-server state machine with model-difference tracking.
//!
//! The server never stores the model itself. It keeps `M = θ − θ₀`, the sum of
//! every update it has received, and for each worker `k` the part of `M` that
//! has already been delivered to that worker (`v_k`). Each upward message is
//! answered with `G = M − v_k`, optionally top-k compressed; whatever is not
//! delivered stays in `M − v_k` and goes out with a later reply.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::sparsify::{select_mask, SparsifyConfig};
use crate::tensor::{decode, diff_as_sparse, encode, ParamVector, SparseUpdate};

#[derive(Debug, Clone)]
pub struct ServerState {
    accumulated: ParamVector,
    delivered: BTreeMap<u32, ParamVector>,
    prev: BTreeMap<u32, u64>,
    clock: u64,
    secondary: Option<SparsifyConfig>,
}

/// Result of serving one upward message.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub downward: SparseUpdate,
    /// Server clock at receipt minus the clock at the worker's previous exchange.
    pub staleness: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerSnapshot {
    pub clock: u64,
    pub accumulated: ParamVector,
    pub prev: BTreeMap<u32, u64>,
    /// `‖M − v_k‖₂` per worker.
    pub residual_norms: BTreeMap<u32, f64>,
}

impl ServerState {
    /// `template` fixes the shape; its values are ignored (`M₀ = 0`).
    pub fn new(template: &ParamVector, secondary: Option<SparsifyConfig>) -> Self {
        Self {
            accumulated: ParamVector::zeros(template.partition().clone()),
            delivered: BTreeMap::new(),
            prev: BTreeMap::new(),
            clock: 0,
            secondary,
        }
    }

    pub fn register_worker(&mut self, worker: u32) -> Result<()> {
        if self.delivered.contains_key(&worker) {
            return Err(Error::DuplicateWorker(worker));
        }
        self.delivered
            .insert(worker, ParamVector::zeros(self.accumulated.partition().clone()));
        self.prev.insert(worker, 0);
        Ok(())
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn accumulated(&self) -> &ParamVector {
        &self.accumulated
    }

    pub fn delivered(&self, worker: u32) -> Option<&ParamVector> {
        self.delivered.get(&worker)
    }

    pub fn prev(&self, worker: u32) -> Option<u64> {
        self.prev.get(&worker).copied()
    }

    pub fn workers(&self) -> impl Iterator<Item = u32> + '_ {
        self.delivered.keys().copied()
    }

    pub fn secondary(&self) -> Option<&SparsifyConfig> {
        self.secondary.as_ref()
    }

    /// What worker `k` has not received yet: `M − v_k`.
    pub fn pending(&self, worker: u32) -> Result<ParamVector> {
        let v = self.delivered.get(&worker).ok_or(Error::UnknownWorker(worker))?;
        self.accumulated.zip_map(v, |m, v| m - v)
    }

    /// `θ₀ + M`.
    pub fn global_model(&self, theta0: &ParamVector) -> Result<ParamVector> {
        theta0.zip_map(&self.accumulated, |t, m| t + m)
    }

    /// Applies an upward update from `worker` and produces its downward delta.
    pub fn on_gradient(&mut self, worker: u32, g: &SparseUpdate) -> Result<Exchange> {
        let prev_old = self.prev(worker).ok_or(Error::UnknownWorker(worker))?;
        self.accumulated.apply_sparse(g, -1.0)?;

        let delivered = self
            .delivered
            .get_mut(&worker)
            .expect("registered workers have an accumulator");
        let full = diff_as_sparse(&self.accumulated, delivered)?;
        let downward = match &self.secondary {
            None => full,
            Some(cfg) => {
                let pending = full.densify(self.accumulated.partition().clone())?;
                let mask = select_mask(&pending, cfg);
                let values = mask.iter().map(|&i| pending.get(i as usize)).collect();
                SparseUpdate::from_sorted_unchecked(mask, values)
            }
        };
        // v_k + G == M on every delivered component; copying M keeps that identity
        // exact instead of subject to rounding in the addition.
        delivered.copy_entries_from(&self.accumulated, &downward);

        let staleness = self.clock - prev_old;
        self.clock += 1;
        self.prev.insert(worker, self.clock);
        Ok(Exchange {
            downward: downward.with_header(worker, self.clock),
            staleness,
        })
    }

    /// Decodes, serves and re-encodes one wire message.
    pub fn on_message(&mut self, bytes: &[u8]) -> Result<(Vec<u8>, u64)> {
        let g = decode(bytes, self.accumulated.len())?;
        let exchange = self.on_gradient(g.worker_id, &g)?;
        Ok((encode(&exchange.downward), exchange.staleness))
    }

    pub fn snapshot(&self) -> ServerSnapshot {
        let residual_norms = self
            .delivered
            .iter()
            .map(|(&k, v)| {
                let sq: f64 = self
                    .accumulated
                    .as_slice()
                    .iter()
                    .zip(v.as_slice())
                    .map(|(m, v)| (m - v) * (m - v))
                    .sum();
                (k, sq.sqrt())
            })
            .collect();
        ServerSnapshot {
            clock: self.clock,
            accumulated: self.accumulated.clone(),
            prev: self.prev.clone(),
            residual_norms,
        }
    }
}
