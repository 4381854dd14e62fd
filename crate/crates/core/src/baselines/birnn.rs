//! Static-embedding Bi-RNN baseline: separate bidirectional GRU encoders
//! for the query and the response, their final states concatenated and
//! classified by a one-hidden-layer tanh MLP.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointHeader};
use crate::corpus::QueryResponsePair;
use crate::embedding::{embed, EmbeddingBackend, EmbeddingBackendSpec};
use crate::engagement::training_fingerprint;
use crate::error::{Error, Result};
use crate::nn::{self, compute_class_weights, weighted_cross_entropy, Adam, Dense, Mlp, TrainConfig, TrainReport};
use crate::stats;

fn sigmoid_vec(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = nn::sigmoid(*x));
}

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(Wz x + Uz h)
/// r  = sigmoid(Wr x + Ur h)
/// n  = tanh(Wn x + r * (Un h))
/// h' = (1 - z) * n + z * h
/// ```
///
/// Every affine map carries its own bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub w_z: Dense,
    pub w_r: Dense,
    pub w_n: Dense,
    pub u_z: Dense,
    pub u_r: Dense,
    pub u_n: Dense,
}

struct GruStep {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    /// `Un h + b`, needed for the reset-gate gradient.
    un_h: Vec<f64>,
}

impl Gru {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut dense = |i: usize| {
            let mut d = Dense::zeros(i, hidden);
            d.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
            d.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
            d
        };
        Self {
            w_z: dense(input),
            w_r: dense(input),
            w_n: dense(input),
            u_z: dense(hidden),
            u_r: dense(hidden),
            u_n: dense(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u_z.out_dim
    }

    pub fn input(&self) -> usize {
        self.w_z.in_dim
    }

    fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.in_dim, d.out_dim);
        Self {
            w_z: z(&self.w_z),
            w_r: z(&self.w_r),
            w_n: z(&self.w_n),
            u_z: z(&self.u_z),
            u_r: z(&self.u_r),
            u_n: z(&self.u_n),
        }
    }

    fn denses(&self) -> [&Dense; 6] {
        [&self.w_z, &self.w_r, &self.w_n, &self.u_z, &self.u_r, &self.u_n]
    }

    fn denses_mut(&mut self) -> [&mut Dense; 6] {
        [&mut self.w_z, &mut self.w_r, &mut self.w_n, &mut self.u_z, &mut self.u_r, &mut self.u_n]
    }

    fn step(&self, x: &[f64], h: &[f64]) -> (Vec<f64>, GruStep) {
        let (mut z, mut r, mut n) = (Vec::new(), Vec::new(), Vec::new());
        let (mut tmp, mut un_h) = (Vec::new(), Vec::new());
        self.w_z.forward_into(x, &mut z);
        self.u_z.forward_into(h, &mut tmp);
        z.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        sigmoid_vec(&mut z);
        self.w_r.forward_into(x, &mut r);
        self.u_r.forward_into(h, &mut tmp);
        r.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        sigmoid_vec(&mut r);
        self.w_n.forward_into(x, &mut n);
        self.u_n.forward_into(h, &mut un_h);
        for k in 0..n.len() {
            n[k] = (n[k] + r[k] * un_h[k]).tanh();
        }
        let h_new: Vec<f64> = (0..n.len()).map(|k| (1.0 - z[k]) * n[k] + z[k] * h[k]).collect();
        (h_new, GruStep { h_prev: h.to_vec(), z, r, n, un_h })
    }

    /// Runs over `xs` from a zero state; returns the final state and the
    /// per-step caches.
    fn run(&self, xs: &[&[f64]]) -> (Vec<f64>, Vec<GruStep>) {
        let mut h = vec![0.0; self.hidden()];
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let (next, cache) = self.step(x, &h);
            steps.push(cache);
            h = next;
        }
        (h, steps)
    }

    /// Backpropagation through time from a gradient on the final state.
    fn backward(&self, xs: &[&[f64]], steps: &[GruStep], d_final: &[f64], grads: &mut Gru) {
        let hsz = self.hidden();
        let mut dh = d_final.to_vec();
        for (x, s) in xs.iter().zip(steps).rev() {
            let mut dh_prev: Vec<f64> = (0..hsz).map(|k| dh[k] * s.z[k]).collect();
            let mut da_n = vec![0.0; hsz];
            let mut da_z = vec![0.0; hsz];
            let mut da_r = vec![0.0; hsz];
            let mut d_unh = vec![0.0; hsz];
            for k in 0..hsz {
                let dn = dh[k] * (1.0 - s.z[k]);
                let dz = dh[k] * (s.h_prev[k] - s.n[k]);
                da_n[k] = dn * (1.0 - s.n[k] * s.n[k]);
                let dr = da_n[k] * s.un_h[k];
                d_unh[k] = da_n[k] * s.r[k];
                da_r[k] = dr * s.r[k] * (1.0 - s.r[k]);
                da_z[k] = dz * s.z[k] * (1.0 - s.z[k]);
            }
            self.w_n.backward(x, &da_n, &mut grads.w_n);
            self.w_r.backward(x, &da_r, &mut grads.w_r);
            self.w_z.backward(x, &da_z, &mut grads.w_z);
            for (d, g, delta) in [
                (&self.u_n, &mut grads.u_n, &d_unh),
                (&self.u_r, &mut grads.u_r, &da_r),
                (&self.u_z, &mut grads.u_z, &da_z),
            ] {
                let back = d.backward(&s.h_prev, delta, g);
                dh_prev.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
            dh = dh_prev;
        }
    }
}

/// Forward and backward GRUs over the same sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoder {
    pub forward: Gru,
    pub backward: Gru,
}

impl BiEncoder {
    fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self { forward: Gru::new(input, hidden, rng), backward: Gru::new(input, hidden, rng) }
    }

    fn zeros_like(&self) -> Self {
        Self { forward: self.forward.zeros_like(), backward: self.backward.zeros_like() }
    }

    /// `[final forward state ; final backward state]`.
    pub fn encode(&self, seq: &[Vec<f64>]) -> Vec<f64> {
        let fwd: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
        let bwd: Vec<&[f64]> = seq.iter().rev().map(Vec::as_slice).collect();
        let (mut hf, _) = self.forward.run(&fwd);
        let (hb, _) = self.backward.run(&bwd);
        hf.extend(hb);
        hf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiRnnConfig {
    /// Hidden width per direction.
    pub hidden: usize,
    pub head_hidden: usize,
    /// Probability of zeroing an encoder output unit during training.
    pub dropout: f64,
    pub train: TrainConfig,
}

impl Default for BiRnnConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            head_hidden: 64,
            dropout: 0.8,
            train: TrainConfig {
                learning_rate: 1e-5,
                epochs: 50,
                batch_size: TrainConfig::DEFAULT_BATCH,
                class_weights: None,
                patience: TrainConfig::DEFAULT_PATIENCE,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiRnnModel {
    pub query_encoder: BiEncoder,
    pub response_encoder: BiEncoder,
    /// `[4 * hidden, head_hidden, 2]`, tanh hidden layer.
    pub head: Mlp,
    pub dropout: f64,
    pub backend: EmbeddingBackendSpec,
    pub seed: u64,
    pub fingerprint: String,
}

/// Token vectors of one (query, response) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub query: Vec<Vec<f64>>,
    pub response: Vec<Vec<f64>>,
    pub label: u8,
}

pub fn token_vectors(backend: &dyn EmbeddingBackend, text: &str) -> Result<Vec<Vec<f64>>> {
    Ok(embed(backend, text)?
        .vectors
        .into_iter()
        .map(|v| v.into_iter().map(f64::from).collect())
        .collect())
}

pub fn sequence_examples(backend: &dyn EmbeddingBackend, pairs: &[QueryResponsePair]) -> Result<Vec<SequenceExample>> {
    pairs
        .iter()
        .map(|p| {
            Ok(SequenceExample {
                query: token_vectors(backend, &p.query)?,
                response: token_vectors(backend, &p.response)?,
                label: p.label.ok_or_else(|| Error::Validation(format!("pair {} has no label", p.pair_id)))?,
            })
        })
        .collect()
}

impl BiRnnModel {
    pub fn new(backend: EmbeddingBackendSpec, cfg: &BiRnnConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let d = backend.dimension;
        let query_encoder = BiEncoder::new(d, cfg.hidden, &mut rng);
        let response_encoder = BiEncoder::new(d, cfg.hidden, &mut rng);
        let head = Mlp::new(&[4 * cfg.hidden, cfg.head_hidden, 2], rng.random());
        Self {
            query_encoder,
            response_encoder,
            head,
            dropout: cfg.dropout,
            backend,
            seed: cfg.train.seed,
            fingerprint: String::new(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.query_encoder.forward.hidden()
    }

    fn encoders(&self) -> [&Gru; 4] {
        [
            &self.query_encoder.forward,
            &self.query_encoder.backward,
            &self.response_encoder.forward,
            &self.response_encoder.backward,
        ]
    }

    fn zeros_like(&self) -> Self {
        Self {
            query_encoder: self.query_encoder.zeros_like(),
            response_encoder: self.response_encoder.zeros_like(),
            head: self.head.zeros_like(),
            ..self.clone()
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in self.encoders() {
            for d in g.denses() {
                out.push(&d.weights);
                out.push(&d.bias);
            }
        }
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for g in [
            &mut self.query_encoder.forward,
            &mut self.query_encoder.backward,
            &mut self.response_encoder.forward,
            &mut self.response_encoder.backward,
        ] {
            for d in g.denses_mut() {
                out.push(&mut d.weights);
                out.push(&mut d.bias);
            }
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Inference logits (no dropout).
    pub fn logits(&self, query: &[Vec<f64>], response: &[Vec<f64>]) -> Vec<f64> {
        let mut c = self.query_encoder.encode(query);
        c.extend(self.response_encoder.encode(response));
        self.head.forward(&c)
    }

    pub fn predict_sequences(&self, query: &[Vec<f64>], response: &[Vec<f64>]) -> f64 {
        nn::softmax(&self.logits(query, response))[1]
    }

    /// Forward with an optional dropout mask, then backpropagate the
    /// weighted cross-entropy gradient `dlogits_fn(logits)` into `grads`.
    fn accumulate(
        &self,
        ex: &SequenceExample,
        mask: Option<&[f64]>,
        dlogits_fn: impl FnOnce(&[f64]) -> Vec<f64>,
        grads: &mut BiRnnModel,
    ) {
        let seqs: [Vec<&[f64]>; 4] = [
            ex.query.iter().map(Vec::as_slice).collect(),
            ex.query.iter().rev().map(Vec::as_slice).collect(),
            ex.response.iter().map(Vec::as_slice).collect(),
            ex.response.iter().rev().map(Vec::as_slice).collect(),
        ];
        let runs: Vec<(Vec<f64>, Vec<GruStep>)> =
            self.encoders().iter().zip(&seqs).map(|(g, xs)| g.run(xs)).collect();
        let mut c: Vec<f64> = runs.iter().flat_map(|(h, _)| h.iter().copied()).collect();
        if let Some(m) = mask {
            c.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let trace = self.head.forward_trace(&c);
        let d_logits = dlogits_fn(trace.output());
        let mut dc = self.head.backward(&trace, &d_logits, &mut grads.head);
        if let Some(m) = mask {
            dc.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let h = self.hidden();
        let grad_encoders = [
            &mut grads.query_encoder.forward,
            &mut grads.query_encoder.backward,
            &mut grads.response_encoder.forward,
            &mut grads.response_encoder.backward,
        ];
        for (k, ((gru, g), ((_, steps), xs))) in
            self.encoders().into_iter().zip(grad_encoders).zip(runs.iter().zip(&seqs)).enumerate()
        {
            gru.backward(xs, steps, &dc[k * h..(k + 1) * h], g);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (mut tensors, mut data) = (Vec::new(), Vec::new());
        let names = ["query.forward", "query.backward", "response.forward", "response.backward"];
        for (name, g) in names.iter().zip(self.encoders()) {
            for (gate, d) in ["w_z", "w_r", "w_n", "u_z", "u_r", "u_n"].iter().zip(g.denses()) {
                checkpoint::push_dense(&format!("{name}.{gate}"), d, &mut tensors, &mut data);
            }
        }
        checkpoint::push_mlp("head.", &self.head, &mut tensors, &mut data);
        let h = self.hidden();
        Checkpoint {
            header: CheckpointHeader {
                kind: "birnn".into(),
                variant: Some("gru".into()),
                layer_widths: self.head.widths(),
                pooling: None,
                backend_id: self.backend.backend_id(),
                backend: self.backend.clone(),
                seed: self.seed,
                training_fingerprint: self.fingerprint.clone(),
                extra: serde_json::json!({ "hidden": h, "dropout": self.dropout }),
                tensors,
            },
            data,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("birnn")?;
        let hd = &ckpt.header;
        let h = hd
            .extra
            .get("hidden")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("birnn checkpoint without hidden width".into()))? as usize;
        let d = hd.backend.dimension;
        let gru = |name: &str| -> Result<Gru> {
            let rd = |gate: &str, i: usize| checkpoint::read_dense(&format!("{name}.{gate}"), i, h, ckpt);
            Ok(Gru {
                w_z: rd("w_z", d)?,
                w_r: rd("w_r", d)?,
                w_n: rd("w_n", d)?,
                u_z: rd("u_z", h)?,
                u_r: rd("u_r", h)?,
                u_n: rd("u_n", h)?,
            })
        };
        Ok(Self {
            query_encoder: BiEncoder { forward: gru("query.forward")?, backward: gru("query.backward")? },
            response_encoder: BiEncoder { forward: gru("response.forward")?, backward: gru("response.backward")? },
            head: checkpoint::read_mlp("head.", &hd.layer_widths, ckpt)?,
            dropout: hd.extra.get("dropout").and_then(|v| v.as_f64()).unwrap_or(0.8),
            backend: hd.backend.clone(),
            seed: hd.seed,
            fingerprint: hd.training_fingerprint.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn balanced_accuracy_of(model: &BiRnnModel, data: &[SequenceExample]) -> Result<f64> {
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    let preds: Vec<u8> = data
        .iter()
        .map(|e| u8::from(model.predict_sequences(&e.query, &e.response) >= 0.5))
        .collect();
    stats::balanced_accuracy(&labels, &preds)
}

/// Minibatch Adam with inverted dropout on the concatenated encodings.
pub fn fit_birnn(
    mut model: BiRnnModel,
    train: &[SequenceExample],
    valid: &[SequenceExample],
    cfg: &TrainConfig,
) -> Result<(BiRnnModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if !(0.0..1.0).contains(&model.dropout) {
        return Err(Error::Validation(format!("dropout {} must be in [0, 1)", model.dropout)));
    }
    let d = model.backend.dimension;
    if let Some(v) = train.iter().chain(valid).flat_map(|e| e.query.iter().chain(&e.response)).find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: v.len() });
    }
    let labels: Vec<u8> = train.iter().map(|e| e.label).collect();
    let weights = match cfg.class_weights {
        Some(w) => w,
        None => compute_class_weights(&labels)?,
    };
    let keep = 1.0 - model.dropout;
    let width = 4 * model.hidden();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb1_0000);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let can_validate = valid.iter().any(|e| e.label == 0) && valid.iter().any(|e| e.label == 1);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, BiRnnModel)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let total: f64 = batch.iter().map(|&i| weights.of(train[i].label)).sum();
            let mut grads = model.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train[i];
                let mask: Vec<f64> = (0..width)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let w = weights.of(ex.label) / total;
                model.accumulate(
                    ex,
                    Some(&mask),
                    |logits| {
                        let (l, g) = weighted_cross_entropy(&[logits.to_vec()], &[ex.label], weights);
                        batch_loss += w * l;
                        g[0].iter().map(|v| v * w).collect()
                    },
                    &mut grads,
                );
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite { epoch, message: format!("batch loss {batch_loss}") });
            }
            adam.step(model.params_mut(), grads.params());
        }
        let loss = {
            let logits: Vec<Vec<f64>> = train.iter().map(|e| model.logits(&e.query, &e.response)).collect();
            weighted_cross_entropy(&logits, &labels, weights).0
        };
        if !loss.is_finite() {
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

pub fn train_birnn(
    train_pairs: &[QueryResponsePair],
    valid_pairs: &[QueryResponsePair],
    cfg: &BiRnnConfig,
    backend: &dyn EmbeddingBackend,
    spec: &EmbeddingBackendSpec,
) -> Result<(BiRnnModel, TrainReport)> {
    if backend.dimension() != spec.dimension {
        return Err(Error::DimensionMismatch { expected: spec.dimension, got: backend.dimension() });
    }
    let train = sequence_examples(backend, train_pairs)?;
    let valid = sequence_examples(backend, valid_pairs)?;
    let (mut model, report) = fit_birnn(BiRnnModel::new(spec.clone(), cfg), &train, &valid, &cfg.train)?;
    model.fingerprint = training_fingerprint(train_pairs, &cfg.train);
    Ok((model, report))
}

pub fn predict_birnn(model: &BiRnnModel, backend: &dyn EmbeddingBackend, pair: &QueryResponsePair) -> Result<f64> {
    if backend.dimension() != model.backend.dimension {
        return Err(Error::DimensionMismatch { expected: model.backend.dimension, got: backend.dimension() });
    }
    let q = token_vectors(backend, &pair.query)?;
    let r = token_vectors(backend, &pair.response)?;
    Ok(model.predict_sequences(&q, &r))
}
