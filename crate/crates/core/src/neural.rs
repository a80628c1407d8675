//! Multi-layer perceptron for next-activity prediction.
//!
//! Hidden layers use rectifier units, the output layer a softmax over the
//! classes. Training minimises mean cross-entropy with mini-batch Adam.
//! Everything runs sequentially so that a given seed always yields the same
//! weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{EncodingSpec, PrefixDataset};

/// Logits are clamped to this magnitude before the softmax.
pub const LOGIT_CLAMP: f64 = 500.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid layer sizes {0:?}: need input, at least one hidden layer and output, all positive")]
    InvalidShape(Vec<usize>),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} exceeds the model's {classes} classes")]
    LabelDimensionMismatch { label: usize, classes: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

/// Fully connected layer; `weights` is `fan_out x fan_in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, bias) in self.weights.chunks_exact(self.fan_in).zip(&self.biases) {
            let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
            out.push(dot + bias);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    pub seed: u64,
}

pub fn init_model(layer_sizes: &[usize], seed: u64) -> Result<MlpModel, ModelError> {
    if layer_sizes.len() < 3 || layer_sizes.contains(&0) {
        return Err(ModelError::InvalidShape(layer_sizes.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_sizes
        .windows(2)
        .map(|pair| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            DenseLayer {
                fan_in,
                fan_out,
                weights: (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect(),
                biases: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpModel { layers, seed })
}

/// Numerically stable softmax of clamped logits. Components are floored at
/// the smallest positive normal so every class keeps non-zero mass.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = logits.iter().map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect();
    let max = clamped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = clamped.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / total).max(f64::MIN_POSITIVE)).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl MlpModel {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].fan_in];
        sizes.extend(self.layers.iter().map(|l| l.fan_out));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn check_input(&self, features: &[f64]) -> Result<(), ModelError> {
        if features.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Pre-softmax output.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(features)?;
        let mut current = features.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&current, &mut next);
            if i < last {
                next.iter_mut().for_each(|z| *z = z.max(0.0));
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(softmax(&self.logits(features)?))
    }

    pub fn predict(&self, features: &[f64]) -> Result<usize, ModelError> {
        Ok(argmax(&self.forward(features)?))
    }

    pub fn predict_all<'a, I>(&self, rows: I) -> Result<Vec<usize>, ModelError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        rows.into_iter().map(|r| self.predict(r)).collect()
    }
}

/// Per-parameter gradients laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    fn scale(&mut self, factor: f64) {
        for g in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn check_batch(model: &MlpModel, batch: &[(&[f64], usize)]) -> Result<(), ModelError> {
    for (x, y) in batch {
        model.check_input(x)?;
        if *y >= model.num_classes() {
            return Err(ModelError::LabelDimensionMismatch {
                label: *y,
                classes: model.num_classes(),
            });
        }
    }
    Ok(())
}

fn sample_loss_and_accumulate(model: &MlpModel, x: &[f64], y: usize, weight: f64, grads: &mut Gradients) -> f64 {
    let last = model.layers.len() - 1;
    // activations[0] is the input, activations[l + 1] the output of layer l
    // (post-rectifier for hidden layers, raw logits for the last).
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len() + 1);
    activations.push(x.to_vec());
    for (i, layer) in model.layers.iter().enumerate() {
        let mut out = Vec::with_capacity(layer.fan_out);
        layer.affine(activations.last().unwrap(), &mut out);
        if i < last {
            out.iter_mut().for_each(|z| *z = z.max(0.0));
        }
        activations.push(out);
    }

    let logits = activations.last().unwrap();
    let clamped: Vec<f64> = logits.iter().map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect();
    let max = clamped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = clamped.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = -(clamped[y] - max - total.ln());

    let mut delta: Vec<f64> = exps
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let indicator = if k == y { 1.0 } else { 0.0 };
            let inside = logits[k].abs() <= LOGIT_CLAMP;
            if inside {
                weight * (e / total - indicator)
            } else {
                0.0
            }
        })
        .collect();

    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let input = &activations[l];
        let gw = &mut grads.weights[l];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in];
            row.iter_mut().zip(input).for_each(|(g, a)| *g += d * a);
            grads.biases[l][o] += d;
        }
        if l == 0 {
            break;
        }
        let mut prev = vec![0.0; layer.fan_in];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
            prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
        }
        // rectifier derivative, taken from the post-activation value
        for (p, a) in prev.iter_mut().zip(input) {
            if *a <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
    weight * loss
}

/// Mean (optionally class-weighted) cross-entropy of a batch and its
/// gradient with respect to every weight and bias.
pub fn loss_and_gradients(
    model: &MlpModel,
    batch: &[(&[f64], usize)],
    class_weights: Option<&[f64]>,
) -> Result<(f64, Gradients), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    check_batch(model, batch)?;
    let mut grads = Gradients::zeros_like(model);
    let mut total = 0.0;
    for &(x, y) in batch {
        let w = class_weights.map_or(1.0, |cw| cw[y]);
        total += sample_loss_and_accumulate(model, x, y, w, &mut grads);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Mean cross-entropy without gradients.
pub fn mean_loss(model: &MlpModel, batch: &[(&[f64], usize)]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    check_batch(model, batch)?;
    let mut total = 0.0;
    for &(x, y) in batch {
        let logits = model.logits(x)?;
        let clamped: Vec<f64> = logits.iter().map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect();
        let max = clamped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = clamped.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        total += lse - clamped[y];
    }
    Ok(total / batch.len() as f64)
}

/// Central finite-difference estimate of the mean loss gradient.
pub fn numerical_gradients(model: &MlpModel, batch: &[(&[f64], usize)], step: f64) -> Result<Gradients, ModelError> {
    let mut probe = model.clone();
    let mut grads = Gradients::zeros_like(model);
    for l in 0..model.layers.len() {
        for i in 0..model.layers[l].weights.len() {
            let w = model.layers[l].weights[i];
            probe.layers[l].weights[i] = w + step;
            let up = mean_loss(&probe, batch)?;
            probe.layers[l].weights[i] = w - step;
            let down = mean_loss(&probe, batch)?;
            probe.layers[l].weights[i] = w;
            grads.weights[l][i] = (up - down) / (2.0 * step);
        }
        for i in 0..model.layers[l].biases.len() {
            let b = model.layers[l].biases[i];
            probe.layers[l].biases[i] = b + step;
            let up = mean_loss(&probe, batch)?;
            probe.layers[l].biases[i] = b - step;
            let down = mean_loss(&probe, batch)?;
            probe.layers[l].biases[i] = b;
            grads.biases[l][i] = (up - down) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// Largest `|a - b| / max(|a|, |b|, 1e-6)` over all parameters.
pub fn max_relative_error(a: &Gradients, b: &Gradients) -> f64 {
    let pairs = a.weights.iter().zip(&b.weights).chain(a.biases.iter().zip(&b.biases));
    pairs
        .flat_map(|(x, y)| x.iter().zip(y))
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Weight each sample's loss by the inverse frequency of its class.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 42,
            shuffle: true,
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn fine_tune() -> Self {
        TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(ModelError::InvalidConfig("betas must lie in [0, 1)"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(ModelError::InvalidConfig("epsilon must be positive"));
        }
        Ok(())
    }
}

struct Adam {
    m: Gradients,
    v: Gradients,
    step: i32,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        Adam {
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut MlpModel, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        let apply = |params: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..params.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        };
        for (l, layer) in model.layers.iter_mut().enumerate() {
            apply(
                &mut layer.weights,
                &grads.weights[l],
                &mut self.m.weights[l],
                &mut self.v.weights[l],
            );
            apply(
                &mut layer.biases,
                &grads.biases[l],
                &mut self.m.biases[l],
                &mut self.v.biases[l],
            );
        }
    }
}

fn inverse_frequency_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) })
        .collect()
}

/// Trains a copy of `model` on raw rows and labels, calling `on_epoch` with
/// the epoch index and its mean loss after every epoch.
pub fn train_rows(
    model: &MlpModel,
    rows: &[&[f64]],
    labels: &[usize],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(MlpModel, Vec<f64>), ModelError> {
    config.validate()?;
    if rows.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    assert_eq!(rows.len(), labels.len(), "rows and labels differ in length");
    let pairs: Vec<(&[f64], usize)> = rows.iter().copied().zip(labels.iter().copied()).collect();
    check_batch(model, &pairs)?;

    let weights = config
        .class_weighting
        .then(|| inverse_frequency_weights(labels, model.num_classes()));
    let mut model = model.clone();
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pairs[i]));
            let (loss, grads) = loss_and_gradients(&model, &batch, weights.as_deref())?;
            epoch_loss += loss * batch.len() as f64;
            adam.update(&mut model, &grads, config);
        }
        let mean = epoch_loss / pairs.len() as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok((model, history))
}

/// Trains on a prefix dataset, returning the trained model and the mean loss
/// of every epoch.
pub fn train(
    model: &MlpModel,
    dataset: &PrefixDataset,
    config: &TrainConfig,
) -> Result<(MlpModel, Vec<f64>), ModelError> {
    let rows = dataset.features();
    train_rows(model, &rows, &dataset.labels(), config, |_, _| {})
}

/// Continues training from the current weights on (re)labelled data.
pub fn fine_tune(model: &MlpModel, dataset: &PrefixDataset, config: &TrainConfig) -> Result<MlpModel, ModelError> {
    train(model, dataset, config).map(|(m, _)| m)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: String,
    pub output: String,
    /// One row-major `fan_out x fan_in` matrix per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoding: Option<EncodingSpec>,
}

impl MlpModel {
    pub fn to_checkpoint(&self, train_config: Option<TrainConfig>, encoding: Option<EncodingSpec>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            layer_sizes: self.layer_sizes(),
            hidden_activation: "relu".into(),
            output: "softmax".into(),
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
            seed: self.seed,
            train_config,
            encoding,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<MlpModel, ModelError> {
        let corrupt = |m: &str| ModelError::CorruptCheckpoint(m.to_string());
        if c.format_version != CHECKPOINT_VERSION {
            return Err(corrupt("unsupported format version"));
        }
        if c.hidden_activation != "relu" || c.output != "softmax" {
            return Err(corrupt("unsupported activation"));
        }
        if c.layer_sizes.len() < 3 || c.layer_sizes.contains(&0) {
            return Err(corrupt("invalid layer sizes"));
        }
        let n = c.layer_sizes.len() - 1;
        if c.weights.len() != n || c.biases.len() != n {
            return Err(corrupt("layer count mismatch"));
        }
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (c.layer_sizes[l], c.layer_sizes[l + 1]);
                if c.weights[l].len() != fan_in * fan_out || c.biases[l].len() != fan_out {
                    return Err(corrupt("weight shape mismatch"));
                }
                Ok(DenseLayer {
                    fan_in,
                    fan_out,
                    weights: c.weights[l].clone(),
                    biases: c.biases[l].clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(MlpModel { layers, seed: c.seed })
    }
}
