//! Desk-scale task model: hashed bag-of-words softmax regression trained with
//! mini-batch gradient descent.
//!
//! Training snapshots the weights at the end of every epoch and records the
//! predicted label distribution of every training example at that point, which
//! is exactly what the cartography code consumes. The same snapshots let us
//! replay predictions for unseen examples afterwards.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, Label};
use crate::dynamics::{DynamicsError, EpochPredictionLog};
use crate::text::{fnv1a, seeded_rng, tokenize};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("example {0:?} has no label")]
    Unlabeled(String),
    #[error("dataset has {n} examples, fewer than the batch size {batch_size}")]
    TooSmall { n: usize, batch_size: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Log(#[from] DynamicsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hash_dims: usize,
    pub rng_seed: u64,
    pub l2: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            epochs: 5,
            learning_rate: 0.1,
            batch_size: 32,
            hash_dims: 256,
            rng_seed: 0,
            l2: 0.0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if self.epochs < 2 {
            return bad("epochs must be >= 2");
        }
        if self.hash_dims < 8 {
            return bad("hash_dims must be >= 8");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.l2 >= 0.0) {
            return bad("l2 must be >= 0");
        }
        Ok(())
    }
}

/// Weights of a softmax regression: one row per label plus a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(labels: usize, dims: usize) -> Self {
        LinearModel {
            weights: vec![vec![0.0; dims]; labels],
            bias: vec![0.0; labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.bias.len()
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + dot(w, x))
            .collect();
        softmax(&logits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelState {
    pub config: ToyModelConfig,
    pub label_names: Vec<String>,
    /// Final weights (same as the last snapshot).
    pub model: LinearModel,
    /// End-of-epoch snapshots, epoch 1 first.
    pub snapshots: Vec<LinearModel>,
}

impl ToyModelState {
    pub fn epochs(&self) -> usize {
        self.snapshots.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let f = File::create(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::to_writer(BufWriter::new(f), self).map_err(|source| TrainError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let f = File::open(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_reader(BufReader::new(f)).map_err(|source| TrainError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Label of the final model's argmax.
    pub fn classify(&self, ex: &Example) -> Label {
        let p = self.model.predict(&featurize(ex, self.config.hash_dims));
        Label::from_index(crate::dynamics::argmax(&p)).unwrap_or(Label::Entailment)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn bucket(token: &str, width: usize) -> usize {
    (fnv1a(token.as_bytes()) % width as u64) as usize
}

/// Hashed term-frequency vector, L2-normalized. Premise tokens land in the
/// first half of the space and hypothesis tokens in the second half.
pub fn featurize(example: &Example, hash_dims: usize) -> Vec<f64> {
    featurize_pair(&example.premise, &example.hypothesis, hash_dims)
}

pub fn featurize_pair(premise: &str, hypothesis: &str, hash_dims: usize) -> Vec<f64> {
    let half = hash_dims / 2;
    let mut v = vec![0.0; hash_dims];
    for t in tokenize(premise) {
        v[bucket(&t, half)] += 1.0;
    }
    for t in tokenize(hypothesis) {
        v[half + bucket(&t, hash_dims - half)] += 1.0;
    }
    let norm = dot(&v, &v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Mean cross-entropy of `model` against (possibly soft) `targets`, plus
/// `l2/2 * ||W||^2`, and its gradient with respect to weights and bias.
pub fn loss_and_gradient(
    model: &LinearModel,
    features: &[Vec<f64>],
    targets: &[Vec<f64>],
    l2: f64,
) -> (f64, LinearModel) {
    let labels = model.num_labels();
    let dims = model.weights.first().map_or(0, Vec::len);
    let mut grad = LinearModel::zeros(labels, dims);
    let mut loss = 0.0;
    let n = features.len().max(1) as f64;
    for (x, t) in features.iter().zip(targets) {
        let p = model.predict(x);
        for y in 0..labels {
            if t[y] > 0.0 {
                loss -= t[y] * p[y].max(f64::MIN_POSITIVE).ln();
            }
            let r = (p[y] - t[y]) / n;
            if r != 0.0 {
                for (g, xi) in grad.weights[y].iter_mut().zip(x) {
                    *g += r * xi;
                }
            }
            grad.bias[y] += r;
        }
    }
    loss /= n;
    if l2 > 0.0 {
        for (gw, w) in grad.weights.iter_mut().zip(&model.weights) {
            for (g, wi) in gw.iter_mut().zip(w) {
                *g += l2 * wi;
                loss += 0.5 * l2 * wi * wi;
            }
        }
    }
    (loss, grad)
}

fn one_hot(label: Label) -> Vec<f64> {
    let mut t = vec![0.0; Label::COUNT];
    t[label.index()] = 1.0;
    t
}

/// Trains for `cfg.epochs` epochs with no early stopping. After every epoch
/// the weights are snapshotted and every training example is re-scored.
pub fn train(ds: &Dataset, cfg: &ToyModelConfig) -> Result<(ToyModelState, EpochPredictionLog), TrainError> {
    cfg.validate()?;
    let labels: Vec<Label> = ds
        .iter()
        .map(|e| e.label.ok_or_else(|| TrainError::Unlabeled(e.id.clone())))
        .collect::<Result<_, _>>()?;
    if ds.len() < cfg.batch_size {
        return Err(TrainError::TooSmall {
            n: ds.len(),
            batch_size: cfg.batch_size,
        });
    }
    let features: Vec<Vec<f64>> = ds.iter().map(|e| featurize(e, cfg.hash_dims)).collect();
    let targets: Vec<Vec<f64>> = labels.iter().map(|l| one_hot(*l)).collect();

    let mut rng = seeded_rng(cfg.rng_seed);
    let mut model = LinearModel::zeros(Label::COUNT, cfg.hash_dims);
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    let mut per_example: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(cfg.epochs); ds.len()];
    let mut order: Vec<usize> = (0..ds.len()).collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| features[i].clone()).collect();
            let ts: Vec<Vec<f64>> = batch.iter().map(|&i| targets[i].clone()).collect();
            let (_, grad) = loss_and_gradient(&model, &xs, &ts, cfg.l2);
            step(&mut model, &grad, cfg.learning_rate);
        }
        for (i, x) in features.iter().enumerate() {
            per_example[i].push(model.predict(x));
        }
        snapshots.push(model.clone());
    }

    let mut log = EpochPredictionLog::new(Label::names(), cfg.epochs)?;
    for ((ex, label), rows) in ds.iter().zip(&labels).zip(per_example) {
        log.push(ex.id.clone(), Some(label.index()), rows)?;
    }
    let state = ToyModelState {
        config: cfg.clone(),
        label_names: Label::names(),
        model,
        snapshots,
    };
    Ok((state, log))
}

fn step(model: &mut LinearModel, grad: &LinearModel, lr: f64) {
    for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= lr * gi;
        }
    }
    for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
        *b -= lr * g;
    }
}

/// Row e is the distribution predicted by the epoch-e snapshot.
pub fn predict_over_epochs(state: &ToyModelState, example: &Example) -> Vec<Vec<f64>> {
    let x = featurize(example, state.config.hash_dims);
    state.snapshots.iter().map(|m| m.predict(&x)).collect()
}

/// Predictions of every snapshot for every example, as a log without gold
/// labels (or with them, when the dataset has them).
pub fn prediction_log(state: &ToyModelState, ds: &Dataset) -> Result<EpochPredictionLog, TrainError> {
    let mut log = EpochPredictionLog::new(state.label_names.clone(), state.epochs())?;
    for ex in ds.iter() {
        log.push(ex.id.clone(), ex.label.map(Label::index), predict_over_epochs(state, ex))?;
    }
    Ok(log)
}

/// Fraction of `ds` the final model classifies correctly.
pub fn accuracy(state: &ToyModelState, ds: &Dataset) -> f64 {
    let labeled: Vec<&Example> = ds.iter().filter(|e| e.label.is_some()).collect();
    if labeled.is_empty() {
        return 0.0;
    }
    let correct = labeled.iter().filter(|e| Some(state.classify(e)) == e.label).count();
    correct as f64 / labeled.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub max_relative_error: f64,
    /// (label row, column) of the worst coordinate; column == dims means bias.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub passed: bool,
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Compares the analytic gradient against central finite differences on a
/// random model and one random batch.
pub fn gradient_check(cfg: &ToyModelConfig) -> Result<GradientReport, TrainError> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.rng_seed);
    let dims = cfg.hash_dims;
    let labels = Label::COUNT;
    let mut model = LinearModel::zeros(labels, dims);
    for w in model.weights.iter_mut().flatten() {
        *w = rng.gen_range(-0.5..0.5);
    }
    for b in model.bias.iter_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    let features: Vec<Vec<f64>> = (0..cfg.batch_size)
        .map(|_| {
            let mut x: Vec<f64> = (0..dims)
                .map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.0..2.0) } else { 0.0 })
                .collect();
            let n = dot(&x, &x).sqrt();
            if n > 0.0 {
                x.iter_mut().for_each(|v| *v /= n);
            }
            x
        })
        .collect();
    let targets: Vec<Vec<f64>> = (0..cfg.batch_size)
        .map(|_| one_hot(Label::ALL[rng.gen_range(0..labels)]))
        .collect();
    Ok(check_against_finite_differences(&model, &features, &targets, cfg.l2))
}

pub fn check_against_finite_differences(
    model: &LinearModel,
    features: &[Vec<f64>],
    targets: &[Vec<f64>],
    l2: f64,
) -> GradientReport {
    const H: f64 = 1e-5;
    let (_, mut analytic) = loss_and_gradient(model, features, targets, l2);
    let dims = model.weights.first().map_or(0, Vec::len);
    let mut worst = (0, 0);
    let mut max_err = 0.0f64;
    let mut coords = 0;
    let mut probe = model.clone();
    for y in 0..model.num_labels() {
        for j in 0..=dims {
            let orig = *coord_mut(&mut probe, y, j);
            *coord_mut(&mut probe, y, j) = orig + H;
            let (up, _) = loss_and_gradient(&probe, features, targets, l2);
            *coord_mut(&mut probe, y, j) = orig - H;
            let (down, _) = loss_and_gradient(&probe, features, targets, l2);
            *coord_mut(&mut probe, y, j) = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = *coord_mut(&mut analytic, y, j);
            let scale = a.abs().max(numeric.abs());
            let err = if scale > 1e-6 {
                (a - numeric).abs() / scale
            } else {
                (a - numeric).abs()
            };
            coords += 1;
            if err > max_err {
                max_err = err;
                worst = (y, j);
            }
        }
    }
    GradientReport {
        max_relative_error: max_err,
        worst,
        coordinates: coords,
        passed: max_err < GRADIENT_TOLERANCE,
    }
}

/// Column `dims` addresses the bias.
fn coord_mut(m: &mut LinearModel, y: usize, j: usize) -> &mut f64 {
    if j == m.weights[y].len() {
        &mut m.bias[y]
    } else {
        &mut m.weights[y][j]
    }
}
