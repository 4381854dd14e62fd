//! Dense tanh networks, Adam, and a class-weighted softmax training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut d = Self::zeros(in_dim, out_dim);
        d.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        d.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        d
    }

    pub fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        out.clear();
        out.extend(self.weights.chunks_exact(self.in_dim).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }

    /// Accumulates `dW += dy x^T`, `db += dy` into `grad` and returns `W^T dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Feed-forward network: tanh after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Intermediate activations of one forward pass.
pub struct Trace {
    /// `acts[0]` is the input, `acts[i+1]` the output of layer `i`.
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace holds the input")
    }
}

impl Mlp {
    /// Hidden layers get fan-in uniform weights; the output layer starts at
    /// zero so an untrained network is indifferent between classes.
    pub fn new(widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                if i + 1 == n {
                    Dense::zeros(widths[i], widths[i + 1])
                } else {
                    Dense::uniform(widths[i], widths[i + 1], &mut rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect() }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_dim];
        w.extend(self.layers.iter().map(|l| l.out_dim));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cur, &mut next);
            if i != last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.forward_into(acts.last().unwrap(), &mut out);
            if i != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        Trace { acts }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the final linear output) and
    /// accumulates parameter gradients into `grads`. Returns the input gradient.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut delta = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward(&trace.acts[i], &delta, &mut grads.layers[i]);
            if i > 0 {
                // acts[i] = tanh(z), d tanh = 1 - a^2
                delta = dx.iter().zip(&trace.acts[i]).map(|(g, a)| g * (1.0 - a * a)).collect();
            } else {
                delta = dx;
            }
        }
        delta
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn scale(&mut self, k: f64) {
        self.params_mut().into_iter().for_each(|p| p.iter_mut().for_each(|v| *v *= k));
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Adaptive-moment optimizer over an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-class loss weights for the two-class problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights { w0: 1.0, w1: 1.0 };

    pub fn of(&self, label: u8) -> f64 {
        if label == 0 {
            self.w0
        } else {
            self.w1
        }
    }
}

/// Inverse-frequency weights `w_c = N / (2 N_c)`.
pub fn compute_class_weights(labels: &[u8]) -> Result<ClassWeights> {
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.iter().filter(|&&l| l == 0).count();
    if n0 + n1 != labels.len() {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    if n0 == 0 || n1 == 0 {
        return Err(Error::SingleClass(format!("{n0} negatives, {n1} positives")));
    }
    let n = labels.len() as f64;
    Ok(ClassWeights { w0: n / (2.0 * n0 as f64), w1: n / (2.0 * n1 as f64) })
}

/// Weighted mean cross-entropy `sum_i w_i * -log p_i[y_i] / sum_i w_i` over a
/// batch of logit vectors. Returns the loss and the per-example gradient
/// w.r.t. the logits.
pub fn weighted_cross_entropy(logits: &[Vec<f64>], labels: &[u8], weights: ClassWeights) -> (f64, Vec<Vec<f64>>) {
    let total: f64 = labels.iter().map(|&y| weights.of(y)).sum();
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let p = softmax(z);
            let w = weights.of(y) / total;
            loss -= w * p[y as usize].max(f64::MIN_POSITIVE).ln();
            p.iter()
                .enumerate()
                .map(|(k, pk)| w * (pk - if k == y as usize { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    (loss, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` derives inverse-frequency weights from the training labels.
    #[serde(default)]
    pub class_weights: Option<ClassWeights>,
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub const DEFAULT_BATCH: usize = 32;
    pub const DEFAULT_PATIENCE: usize = 5;

    /// 1e-3 for mean pooling, 1e-2 for max pooling.
    pub fn for_pooling(pooling: crate::embedding::Pooling) -> Self {
        let learning_rate = match pooling {
            crate::embedding::Pooling::Mean => 1e-3,
            crate::embedding::Pooling::Max => 1e-2,
        };
        Self {
            learning_rate,
            epochs: 50,
            batch_size: Self::DEFAULT_BATCH,
            class_weights: None,
            patience: Self::DEFAULT_PATIENCE,
            seed: 0,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 {
            return Err(Error::Validation("learning rate and batch size must be positive".into()));
        }
        if let Some(w) = self.class_weights {
            if !(w.w0 > 0.0 && w.w1 > 0.0) {
                return Err(Error::Validation("class weights must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One labeled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Weighted training loss measured on the full training set after each epoch.
    pub epoch_losses: Vec<f64>,
    pub valid_balanced_accuracy: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_valid_balanced_accuracy: Option<f64>,
}

/// Positive-class probability of a two-logit head.
pub fn positive_probability(model: &Mlp, features: &[f64]) -> f64 {
    softmax(&model.forward(features))[1]
}

pub fn dataset_loss(model: &Mlp, data: &[Example], weights: ClassWeights) -> f64 {
    let logits: Vec<Vec<f64>> = data.iter().map(|e| model.forward(&e.features)).collect();
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    weighted_cross_entropy(&logits, &labels, weights).0
}

pub fn balanced_accuracy_of(model: &Mlp, data: &[Example]) -> Result<f64> {
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    let preds: Vec<u8> = data
        .iter()
        .map(|e| u8::from(positive_probability(model, &e.features) >= 0.5))
        .collect();
    stats::balanced_accuracy(&labels, &preds)
}

/// Minibatch Adam on class-weighted cross-entropy, keeping the epoch with
/// the best validation balanced accuracy and stopping after `patience`
/// epochs without improvement. Without a usable validation set (empty or
/// single-class) the final epoch is returned.
pub fn fit_softmax(mut model: Mlp, train: &[Example], valid: &[Example], cfg: &TrainConfig) -> Result<(Mlp, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if let Some(e) = train.iter().chain(valid).find(|e| e.features.len() != model.input_dim()) {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), got: e.features.len() });
    }
    let labels: Vec<u8> = train.iter().map(|e| e.label).collect();
    let weights = match cfg.class_weights {
        Some(w) => w,
        None => compute_class_weights(&labels)?,
    };

    let mut report = TrainReport::default();
    let mut best: Option<(f64, Mlp)> = None;
    let mut since_best = 0usize;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let can_validate = valid.iter().any(|e| e.label == 0) && valid.iter().any(|e| e.label == 1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zeros_like();
            let traces: Vec<Trace> = batch.iter().map(|&i| model.forward_trace(&train[i].features)).collect();
            let logits: Vec<Vec<f64>> = traces.iter().map(|t| t.output().to_vec()).collect();
            let batch_labels: Vec<u8> = batch.iter().map(|&i| train[i].label).collect();
            let (loss, dlogits) = weighted_cross_entropy(&logits, &batch_labels, weights);
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, message: format!("batch loss {loss}") });
            }
            for (trace, d) in traces.iter().zip(&dlogits) {
                model.backward(trace, d, &mut grads);
            }
            adam.step(model.params_mut(), grads.params());
        }
        let loss = dataset_loss(&model, train, weights);
        if !loss.is_finite() || !model.all_finite() {
            return Err(Error::NonFinite { epoch, message: format!("training loss {loss}") });
        }
        report.epoch_losses.push(loss);

        if can_validate {
            let bacc = balanced_accuracy_of(&model, valid)?;
            report.valid_balanced_accuracy.push(bacc);
            if best.as_ref().is_none_or(|(b, _)| bacc > *b) {
                best = Some((bacc, model.clone()));
                report.best_epoch = Some(epoch);
                report.best_valid_balanced_accuracy = Some(bacc);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > cfg.patience {
                    break;
                }
            }
        }
    }
    Ok((best.map(|(_, m)| m).unwrap_or(model), report))
}
