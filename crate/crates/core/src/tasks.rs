//! Small differentiable tasks with analytic gradients.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LayerPartition, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// `None` for regression-style tasks.
    pub accuracy: Option<f64>,
}

/// A differentiable objective over a fixed training set.
///
/// Batches are lists of positions into the training split, `0..train_len()`.
pub trait Task: Send + Sync {
    fn name(&self) -> &str;

    fn partition(&self) -> &Arc<LayerPartition>;

    fn initial_params(&self) -> ParamVector;

    fn train_len(&self) -> usize;

    /// Mean loss over the batch.
    fn loss(&self, theta: &ParamVector, batch: &[usize]) -> f64;

    /// Gradient of [`Task::loss`]; errors if any component is non-finite.
    fn grad(&self, theta: &ParamVector, batch: &[usize]) -> Result<ParamVector>;

    fn evaluate(&self, theta: &ParamVector, split: Split) -> Evaluation;
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
pub fn gradcheck(task: &dyn Task, theta: &ParamVector, batch: &[usize], step: f64) -> Result<f64> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!("gradcheck step must be positive, got {step}")));
    }
    let analytic = task.grad(theta, batch)?;
    let mut probe = theta.clone().into_values();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = task.loss(
            &ParamVector::from_values(probe.clone(), theta.partition().clone())?,
            batch,
        );
        probe[i] = orig - step;
        let down = task.loss(
            &ParamVector::from_values(probe.clone(), theta.partition().clone())?,
            batch,
        );
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.get(i);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// `½‖θ − θ*‖²`. Single-layer; has no data, so its training set is one notional sample.
#[derive(Debug, Clone)]
pub struct QuadraticBowl {
    optimum: Vec<f64>,
    partition: Arc<LayerPartition>,
}

impl QuadraticBowl {
    pub fn new(optimum: Vec<f64>) -> Result<Self> {
        if optimum.is_empty() {
            return Err(Error::Config("quadratic bowl needs dim >= 1".into()));
        }
        if optimum.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("quadratic bowl optimum must be finite".into()));
        }
        let partition = Arc::new(LayerPartition::single(optimum.len())?);
        Ok(Self { optimum, partition })
    }

    /// Optimum drawn from `N(0, 1)` with the given seed.
    pub fn random(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let optimum = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(optimum)
    }

    pub fn optimum(&self) -> &[f64] {
        &self.optimum
    }
}

impl Task for QuadraticBowl {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn partition(&self) -> &Arc<LayerPartition> {
        &self.partition
    }

    fn initial_params(&self) -> ParamVector {
        ParamVector::zeros(self.partition.clone())
    }

    fn train_len(&self) -> usize {
        1
    }

    fn loss(&self, theta: &ParamVector, _batch: &[usize]) -> f64 {
        0.5 * theta
            .as_slice()
            .iter()
            .zip(&self.optimum)
            .map(|(t, o)| (t - o) * (t - o))
            .sum::<f64>()
    }

    fn grad(&self, theta: &ParamVector, _batch: &[usize]) -> Result<ParamVector> {
        let values = theta.as_slice().iter().zip(&self.optimum).map(|(t, o)| t - o).collect();
        ParamVector::from_values(values, self.partition.clone())
    }

    fn evaluate(&self, theta: &ParamVector, _split: Split) -> Evaluation {
        Evaluation {
            loss: self.loss(theta, &[]),
            accuracy: None,
        }
    }
}

/// Labelled feature vectors with a fixed train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    n_features: usize,
    n_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    train: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    split: String,
    label: usize,
    features: String,
}

impl SyntheticDataset {
    pub fn from_parts(
        n_features: usize,
        n_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        if n_features == 0 || features.len() != n_features * labels.len() {
            return Err(Error::Config("feature matrix does not match labels".into()));
        }
        if labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::Config("label out of range".into()));
        }
        let mut seen = vec![false; labels.len()];
        for &i in train.iter().chain(&test) {
            if i >= labels.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("split index {i} invalid or repeated")));
            }
        }
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        Ok(Self {
            n_features,
            n_classes,
            features,
            labels,
            train,
            test,
        })
    }

    /// Two unit-variance Gaussian blobs whose means sit `separation` apart along
    /// the diagonal; balanced labels; 80/20 train/test split.
    pub fn gaussian_blobs(n_features: usize, n_samples: usize, separation: f64, seed: u64) -> Result<Self> {
        if n_features == 0 || n_samples < 2 || !(separation.is_finite() && separation > 0.0) {
            return Err(Error::Config(
                "blobs need n_features >= 1, n_samples >= 2 and separation > 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = 0.5 * separation / (n_features as f64).sqrt();
        let mut features = Vec::with_capacity(n_features * n_samples);
        let mut labels = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let label = i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            for _ in 0..n_features {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(sign * shift + noise);
            }
            labels.push(label);
        }
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut rng);
        let n_train = ((n_samples * 4) / 5).max(1);
        let test = order.split_off(n_train);
        Self::from_parts(n_features, 2, features, labels, order, test)
    }

    /// The four corners of the square, labelled by the sign of `x·y`. All training.
    pub fn xor() -> Self {
        let features = vec![-1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0];
        let labels = vec![0, 1, 1, 0];
        Self::from_parts(2, 2, features, labels, vec![0, 1, 2, 3], Vec::new()).unwrap()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (
            &self.features[i * self.n_features..(i + 1) * self.n_features],
            self.labels[i],
        )
    }

    /// Sample at position `pos` of the training split.
    fn train_sample(&self, pos: usize) -> (&[f64], usize) {
        self.sample(self.train[pos])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut split_of = vec![""; self.len()];
        for &i in &self.train {
            split_of[i] = "train";
        }
        for &i in &self.test {
            split_of[i] = "test";
        }
        for (i, split) in split_of.iter().enumerate() {
            let (x, label) = self.sample(i);
            let row = CsvRow {
                split: split.to_string(),
                label,
                features: x.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" "),
            };
            wtr.serialize(row).map_err(csv_err)?;
        }
        wtr.flush()
            .map_err(|e| Error::Config(format!("csv write failed: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, n_classes: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let (mut features, mut labels, mut train, mut test) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut n_features = None;
        for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(csv_err)?;
            let x: Vec<f64> = row
                .features
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Config(format!("row {i}: {e}"))))
                .collect::<Result<_>>()?;
            if *n_features.get_or_insert(x.len()) != x.len() {
                return Err(Error::Config(format!("row {i} has {} features", x.len())));
            }
            features.extend(x);
            labels.push(row.label);
            match row.split.as_str() {
                "train" => train.push(i),
                "test" => test.push(i),
                "" => {}
                other => return Err(Error::Config(format!("row {i}: unknown split {other:?}"))),
            }
        }
        Self::from_parts(n_features.unwrap_or(0), n_classes, features, labels, train, test)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary logistic regression with cross-entropy loss. Layers: weights, bias.
#[derive(Debug, Clone)]
pub struct LogisticTask {
    data: Arc<SyntheticDataset>,
    partition: Arc<LayerPartition>,
}

impl LogisticTask {
    pub fn new(data: Arc<SyntheticDataset>) -> Result<Self> {
        if data.n_classes() != 2 {
            return Err(Error::Config("logistic regression needs two classes".into()));
        }
        let partition = Arc::new(LayerPartition::from_sizes(&[data.n_features(), 1])?);
        Ok(Self { data, partition })
    }

    /// Gaussian-blob classification problem.
    pub fn blobs(n_features: usize, n_samples: usize, separation: f64, seed: u64) -> Result<Self> {
        Self::new(Arc::new(SyntheticDataset::gaussian_blobs(
            n_features, n_samples, separation, seed,
        )?))
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        &self.data
    }

    fn logit(&self, theta: &[f64], x: &[f64]) -> f64 {
        let d = x.len();
        theta[..d].iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + theta[d]
    }

    fn sample_loss(&self, theta: &[f64], x: &[f64], y: usize) -> f64 {
        let z = self.logit(theta, x);
        softplus(z) - if y == 1 { z } else { 0.0 }
    }
}

impl Task for LogisticTask {
    fn name(&self) -> &str {
        "logistic"
    }

    fn partition(&self) -> &Arc<LayerPartition> {
        &self.partition
    }

    fn initial_params(&self) -> ParamVector {
        ParamVector::zeros(self.partition.clone())
    }

    fn train_len(&self) -> usize {
        self.data.split(Split::Train).len()
    }

    fn loss(&self, theta: &ParamVector, batch: &[usize]) -> f64 {
        let t = theta.as_slice();
        let total: f64 = batch
            .iter()
            .map(|&p| {
                let (x, y) = self.data.train_sample(p);
                self.sample_loss(t, x, y)
            })
            .sum();
        total / batch.len().max(1) as f64
    }

    fn grad(&self, theta: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
        let t = theta.as_slice();
        let d = self.data.n_features();
        let mut g = vec![0.0; d + 1];
        for &p in batch {
            let (x, y) = self.data.train_sample(p);
            let err = sigmoid(self.logit(t, x)) - y as f64;
            for (gi, xi) in g[..d].iter_mut().zip(x) {
                *gi += err * xi;
            }
            g[d] += err;
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        g.iter_mut().for_each(|v| *v *= scale);
        ParamVector::from_values(g, self.partition.clone())
    }

    fn evaluate(&self, theta: &ParamVector, split: Split) -> Evaluation {
        let t = theta.as_slice();
        let idx = self.data.split(split);
        let (mut loss, mut correct) = (0.0, 0usize);
        for &i in idx {
            let (x, y) = self.data.sample(i);
            loss += self.sample_loss(t, x, y);
            let predicted = usize::from(self.logit(t, x) > 0.0);
            correct += usize::from(predicted == y);
        }
        let n = idx.len().max(1) as f64;
        Evaluation {
            loss: loss / n,
            accuracy: Some(correct as f64 / n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected network with softmax cross-entropy output.
///
/// Every weight matrix and every bias vector is its own layer, so the
/// partition has `2 · (#sizes − 1)` layers, in the order `W₁, b₁, W₂, b₂, …`.
/// Weight matrices are row-major `out × in`.
#[derive(Debug, Clone)]
pub struct MlpTask {
    sizes: Vec<usize>,
    activation: Activation,
    data: Arc<SyntheticDataset>,
    partition: Arc<LayerPartition>,
    init_seed: u64,
}

impl MlpTask {
    pub fn new(sizes: Vec<usize>, activation: Activation, data: Arc<SyntheticDataset>, init_seed: u64) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::Config("an MLP needs at least one hidden layer".into()));
        }
        if sizes.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if sizes[0] != data.n_features() || *sizes.last().unwrap() != data.n_classes() {
            return Err(Error::Config(format!(
                "layer sizes {:?} do not match {} features / {} classes",
                sizes,
                data.n_features(),
                data.n_classes()
            )));
        }
        let layer_sizes: Vec<usize> = sizes.windows(2).flat_map(|w| [w[0] * w[1], w[1]]).collect();
        let partition = Arc::new(LayerPartition::from_sizes(&layer_sizes)?);
        Ok(Self {
            sizes,
            activation,
            data,
            partition,
            init_seed,
        })
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        &self.data
    }

    fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    fn weights<'a>(&self, theta: &'a [f64], l: usize) -> (&'a [f64], &'a [f64]) {
        let w = self.partition.range(2 * l);
        let b = self.partition.range(2 * l + 1);
        (&theta[w], &theta[b])
    }

    /// Activations of every layer, input first; the last entry holds softmax probabilities.
    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for l in 0..self.depth() {
            let (w, b) = self.weights(theta, l);
            let input = &acts[l];
            let n_in = self.sizes[l];
            let mut z: Vec<f64> = (0..self.sizes[l + 1])
                .map(|o| {
                    b[o] + w[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(input)
                        .map(|(w, a)| w * a)
                        .sum::<f64>()
                })
                .collect();
            if l + 1 < self.depth() {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            } else {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                z.iter_mut().for_each(|v| *v = (*v - max).exp() / sum);
            }
            acts.push(z);
        }
        acts
    }

    fn logits_loss(&self, theta: &[f64], x: &[f64], y: usize) -> (f64, usize) {
        // recompute the last layer's logits for a stable log-softmax
        let acts = self.forward(theta, x);
        let l = self.depth() - 1;
        let (w, b) = self.weights(theta, l);
        let n_in = self.sizes[l];
        let input = &acts[l];
        let z: Vec<f64> = (0..self.sizes[l + 1])
            .map(|o| {
                b[o] + w[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(input)
                    .map(|(w, a)| w * a)
                    .sum::<f64>()
            })
            .collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let predicted = z
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            )
            .0;
        (lse - z[y], predicted)
    }

    fn accumulate_grad(&self, theta: &[f64], x: &[f64], y: usize, grad: &mut [f64]) {
        let acts = self.forward(theta, x);
        let mut delta: Vec<f64> = acts[self.depth()].clone();
        delta[y] -= 1.0;
        for l in (0..self.depth()).rev() {
            let n_in = self.sizes[l];
            let input = &acts[l];
            let w_range = self.partition.range(2 * l);
            let b_range = self.partition.range(2 * l + 1);
            for (o, d) in delta.iter().enumerate() {
                grad[b_range.start + o] += d;
                let row = w_range.start + o * n_in;
                for (i, a) in input.iter().enumerate() {
                    grad[row + i] += d * a;
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.weights(theta, l);
            delta = (0..n_in)
                .map(|i| {
                    let back: f64 = delta.iter().enumerate().map(|(o, d)| d * w[o * n_in + i]).sum();
                    back * self.activation.derivative(input[i])
                })
                .collect();
        }
    }
}

impl Task for MlpTask {
    fn name(&self) -> &str {
        "mlp"
    }

    fn partition(&self) -> &Arc<LayerPartition> {
        &self.partition
    }

    /// Uniform `±1/√fan_in` weights, zero biases.
    fn initial_params(&self) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let mut values = vec![0.0; self.partition.total()];
        for l in 0..self.depth() {
            let bound = 1.0 / (self.sizes[l] as f64).sqrt();
            for v in &mut values[self.partition.range(2 * l)] {
                *v = rng.random_range(-bound..bound);
            }
        }
        ParamVector::from_values(values, self.partition.clone()).unwrap()
    }

    fn train_len(&self) -> usize {
        self.data.split(Split::Train).len()
    }

    fn loss(&self, theta: &ParamVector, batch: &[usize]) -> f64 {
        let t = theta.as_slice();
        let total: f64 = batch
            .iter()
            .map(|&p| {
                let (x, y) = self.data.train_sample(p);
                self.logits_loss(t, x, y).0
            })
            .sum();
        total / batch.len().max(1) as f64
    }

    fn grad(&self, theta: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
        let t = theta.as_slice();
        let mut g = vec![0.0; t.len()];
        for &p in batch {
            let (x, y) = self.data.train_sample(p);
            self.accumulate_grad(t, x, y, &mut g);
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        g.iter_mut().for_each(|v| *v *= scale);
        ParamVector::from_values(g, self.partition.clone())
    }

    fn evaluate(&self, theta: &ParamVector, split: Split) -> Evaluation {
        let t = theta.as_slice();
        let idx = self.data.split(split);
        let (mut loss, mut correct) = (0.0, 0usize);
        for &i in idx {
            let (x, y) = self.data.sample(i);
            let (l, predicted) = self.logits_loss(t, x, y);
            loss += l;
            correct += usize::from(predicted == y);
        }
        let n = idx.len().max(1) as f64;
        Evaluation {
            loss: loss / n,
            accuracy: Some(correct as f64 / n),
        }
    }
}

/// Adds a constant to the first gradient component. Negative control for gradcheck.
pub struct PerturbedGradient<T> {
    pub inner: T,
    pub offset: f64,
}

impl<T: Task> Task for PerturbedGradient<T> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn partition(&self) -> &Arc<LayerPartition> {
        self.inner.partition()
    }

    fn initial_params(&self) -> ParamVector {
        self.inner.initial_params()
    }

    fn train_len(&self) -> usize {
        self.inner.train_len()
    }

    fn loss(&self, theta: &ParamVector, batch: &[usize]) -> f64 {
        self.inner.loss(theta, batch)
    }

    fn grad(&self, theta: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
        let mut values = self.inner.grad(theta, batch)?.into_values();
        values[0] += self.offset;
        ParamVector::from_values(values, self.partition().clone())
    }

    fn evaluate(&self, theta: &ParamVector, split: Split) -> Evaluation {
        self.inner.evaluate(theta, split)
    }
}

impl Task for Box<dyn Task> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn partition(&self) -> &Arc<LayerPartition> {
        (**self).partition()
    }

    fn initial_params(&self) -> ParamVector {
        (**self).initial_params()
    }

    fn train_len(&self) -> usize {
        (**self).train_len()
    }

    fn loss(&self, theta: &ParamVector, batch: &[usize]) -> f64 {
        (**self).loss(theta, batch)
    }

    fn grad(&self, theta: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
        (**self).grad(theta, batch)
    }

    fn evaluate(&self, theta: &ParamVector, split: Split) -> Evaluation {
        (**self).evaluate(theta, split)
    }
}

/// Random parameter vector with components in `[-scale, scale)`.
pub fn random_params(partition: &Arc<LayerPartition>, scale: f64, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..partition.total())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    ParamVector::from_values(values, partition.clone()).unwrap()
}
