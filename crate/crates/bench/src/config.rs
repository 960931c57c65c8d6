//! JSON experiment configuration and its translation into a simulator setup.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use dgs_core::sim::{DelayModel, LinkModel, SimConfig};
use dgs_core::tasks::{Activation, LogisticTask, MlpTask, QuadraticBowl, SyntheticDataset, Task};
use dgs_core::{Hyperparams, SparsifyConfig, StrategyKind};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Single-node momentum SGD; the worker count is forced to 1.
    Msgd,
    /// Dense asynchronous SGD, optionally with momentum.
    Asgd,
    /// Gradient dropping with residual accumulation, on the dual-way path.
    GdAsync,
    /// Momentum correction with velocity accumulation, on the dual-way path.
    DgcAsync,
    DgsResidual,
    DgsSamomentum,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Msgd => "msgd",
            Method::Asgd => "asgd",
            Method::GdAsync => "gd_async",
            Method::DgcAsync => "dgc_async",
            Method::DgsResidual => "dgs_residual",
            Method::DgsSamomentum => "dgs_samomentum",
        }
    }

    pub fn strategy(self) -> StrategyKind {
        match self {
            Method::Msgd | Method::Asgd => StrategyKind::Dense,
            Method::GdAsync | Method::DgsResidual => StrategyKind::Residual,
            Method::DgcAsync => StrategyKind::Dgc,
            Method::DgsSamomentum => StrategyKind::SaMomentum,
        }
    }

    pub fn is_dense(self) -> bool {
        self.strategy() == StrategyKind::Dense
    }

    pub fn requires_momentum(self) -> bool {
        matches!(self, Method::Msgd | Method::DgcAsync | Method::DgsSamomentum)
    }

    /// Whether the momentum factor has any effect.
    pub fn uses_momentum(self) -> bool {
        self.requires_momentum() || self == Method::Asgd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        n_features: usize,
        n_samples: usize,
        separation: f64,
        seed: u64,
    },
    Xor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Quadratic {
        dim: usize,
        seed: u64,
    },
    Logistic {
        n_features: usize,
        n_samples: usize,
        separation: f64,
        seed: u64,
    },
    Mlp {
        /// Input, hidden..., output widths.
        layers: Vec<usize>,
        activation: Activation,
        dataset: DatasetSpec,
        #[serde(default)]
        init_seed: u64,
    },
}

impl TaskSpec {
    pub fn build(&self) -> Result<Box<dyn Task>> {
        let task: Box<dyn Task> = match self {
            TaskSpec::Quadratic { dim, seed } => Box::new(QuadraticBowl::random(*dim, *seed)?),
            TaskSpec::Logistic {
                n_features,
                n_samples,
                separation,
                seed,
            } => Box::new(LogisticTask::blobs(*n_features, *n_samples, *separation, *seed)?),
            TaskSpec::Mlp {
                layers,
                activation,
                dataset,
                init_seed,
            } => {
                let data = match dataset {
                    DatasetSpec::Blobs {
                        n_features,
                        n_samples,
                        separation,
                        seed,
                    } => SyntheticDataset::gaussian_blobs(*n_features, *n_samples, *separation, *seed)?,
                    DatasetSpec::Xor => SyntheticDataset::xor(),
                };
                Box::new(MlpTask::new(layers.clone(), *activation, Arc::new(data), *init_seed)?)
            }
        };
        Ok(task)
    }

    fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Quadratic { dim, .. } if *dim == 0 => Err(BenchError::field("task.dim", "must be at least 1")),
            TaskSpec::Logistic {
                n_features,
                n_samples,
                separation,
                ..
            } => {
                if *n_features == 0 {
                    return Err(BenchError::field("task.n_features", "must be at least 1"));
                }
                if *n_samples < 2 {
                    return Err(BenchError::field("task.n_samples", "must be at least 2"));
                }
                if !(separation.is_finite() && *separation > 0.0) {
                    return Err(BenchError::field("task.separation", "must be positive"));
                }
                Ok(())
            }
            TaskSpec::Mlp { layers, .. } if layers.len() < 3 => Err(BenchError::field(
                "task.layers",
                "need input, at least one hidden and an output width",
            )),
            _ => Ok(()),
        }
    }
}

fn default_compute() -> Vec<DelayModel> {
    vec![DelayModel::jittered(10.0)]
}

fn default_link() -> LinkModel {
    LinkModel::gigabit(0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row name in comparisons; defaults to the config file stem, then the method.
    #[serde(default)]
    pub label: Option<String>,
    pub method: Method,
    pub workers: u32,
    /// Percentage of each layer's entries dropped per message.
    #[serde(default)]
    pub drop_ratio: Option<f64>,
    #[serde(default)]
    pub momentum: Option<f64>,
    pub learning_rate: f64,
    /// `(epoch, factor)` pairs; the rate is multiplied by `factor` from `epoch` on.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub epochs: usize,
    pub task: TaskSpec,
    /// Per-worker compute delay models, cycled over workers.
    #[serde(default = "default_compute")]
    pub compute: Vec<DelayModel>,
    #[serde(default = "default_link")]
    pub uplink: LinkModel,
    #[serde(default = "default_link")]
    pub downlink: LinkModel,
    #[serde(default)]
    pub secondary_compression: bool,
    /// Server-side drop ratio; defaults to `drop_ratio`.
    #[serde(default)]
    pub secondary_drop_ratio: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Evaluate the global model every this many exchanges; defaults to once per epoch.
    #[serde(default)]
    pub eval_every: Option<u64>,
}

/// A validated config ready to run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sim: SimConfig,
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| BenchError::Parse {
            path: path.to_path_buf(),
            field: e.path().to_string(),
            source: e.into_inner(),
        })?;
        de.end().map_err(|source| BenchError::Parse {
            path: path.to_path_buf(),
            field: ".".into(),
            source,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        if cfg.label.is_none() {
            cfg.label = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn effective_workers(&self) -> u32 {
        if self.method == Method::Msgd {
            1
        } else {
            self.workers
        }
    }

    /// Checks every field and builds the simulator config for `seed`.
    pub fn prepare(&self, seed: u64) -> Result<Prepared> {
        let mut warnings = Vec::new();
        if self.workers == 0 {
            return Err(BenchError::field("workers", "must be at least 1"));
        }
        if self.method == Method::Msgd && self.workers != 1 {
            warnings.push(format!(
                "workers = {} ignored: msgd runs on a single node",
                self.workers
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(BenchError::field("learning_rate", "must be a positive number"));
        }
        for (i, &(_, factor)) in self.lr_schedule.iter().enumerate() {
            if !(factor.is_finite() && factor > 0.0) {
                return Err(BenchError::field(
                    format!("lr_schedule[{i}]"),
                    "factor must be positive",
                ));
            }
        }
        if self.batch_size == 0 {
            return Err(BenchError::field("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(BenchError::field("epochs", "must be at least 1"));
        }
        if self.compute.is_empty() {
            return Err(BenchError::field("compute", "need at least one delay model"));
        }
        for (i, d) in self.compute.iter().enumerate() {
            d.validate()
                .map_err(|_| BenchError::field(format!("compute[{i}]"), "invalid delay parameters"))?;
        }
        for (name, link) in [("uplink", &self.uplink), ("downlink", &self.downlink)] {
            link.validate()
                .map_err(|_| BenchError::field(name, "latency must be ≥ 0 and bandwidth > 0"))?;
        }
        if self.eval_every == Some(0) {
            return Err(BenchError::field("eval_every", "must be at least 1"));
        }
        self.task.validate()?;

        let momentum = match (self.momentum, self.method) {
            (None, m) if m.requires_momentum() => {
                return Err(BenchError::field(
                    "momentum",
                    format!("required for method {}", m.name()),
                ))
            }
            (Some(v), m) if !m.uses_momentum() => {
                warnings.push(format!("momentum = {v} ignored by method {}", m.name()));
                0.0
            }
            (v, _) => v.unwrap_or(0.0),
        };
        let momentum_ok = if self.method == Method::DgsSamomentum {
            momentum > 0.0 && momentum < 1.0
        } else {
            (0.0..1.0).contains(&momentum)
        };
        if !momentum_ok {
            return Err(BenchError::field("momentum", "must lie in (0, 1) for this method"));
        }

        let ratio =
            |field: &str, r: f64| SparsifyConfig::new(r).map_err(|_| BenchError::field(field, "must lie in [0, 100)"));
        let sparsify = match self.drop_ratio {
            Some(r) if self.method.is_dense() => {
                warnings.push(format!(
                    "drop_ratio = {r} ignored by dense method {}",
                    self.method.name()
                ));
                SparsifyConfig::dense()
            }
            Some(r) => ratio("drop_ratio", r)?,
            None if self.method.is_dense() => SparsifyConfig::dense(),
            None => return Err(BenchError::field("drop_ratio", "required for sparse methods")),
        };
        let secondary = if self.secondary_compression {
            let r = self
                .secondary_drop_ratio
                .or(self.drop_ratio)
                .ok_or_else(|| BenchError::field("secondary_drop_ratio", "needed when secondary_compression is on"))?;
            Some(ratio("secondary_drop_ratio", r)?)
        } else {
            if self.secondary_drop_ratio.is_some() {
                warnings.push("secondary_drop_ratio ignored: secondary_compression is off".into());
            }
            None
        };

        let hyperparams = Hyperparams::new(self.learning_rate, momentum)
            .and_then(|h| h.with_schedule(self.lr_schedule.clone()))
            .map_err(|e| BenchError::field("lr_schedule", e.to_string()))?;
        let sim = SimConfig {
            workers: self.effective_workers(),
            strategy: self.method.strategy(),
            hyperparams,
            sparsify,
            secondary,
            batch_size: self.batch_size,
            epochs: self.epochs,
            compute: self.compute.clone(),
            uplink: self.uplink,
            downlink: self.downlink,
            seed,
            eval_every: self.eval_every,
        };
        sim.validate()?;
        Ok(Prepared { sim, warnings })
    }
}
