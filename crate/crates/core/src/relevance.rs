//! Unreferenced relevance scoring: how well a response fits its query,
//! learned from true pairs against randomly re-matched negatives.
//!
//! Two variants share the engagement MLP topology:
//! * `Ranking`: one logistic output unit trained with the margin loss
//!   `max(0, margin - s(q, r+) + s(q, r-))`.
//! * `CrossEntropy`: a two-way softmax classifier of true vs sampled pairs.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointHeader};
use crate::corpus::QueryResponsePair;
use crate::embedding::{EmbeddingBackend, EmbeddingBackendSpec, Pooling};
use crate::engagement::{layer_widths, pair_features, training_fingerprint};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, ClassWeights, Example, Mlp, TrainConfig};

pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceVariant {
    Ranking,
    CrossEntropy,
}

impl RelevanceVariant {
    pub fn name(self) -> &'static str {
        match self {
            RelevanceVariant::Ranking => "ranking",
            RelevanceVariant::CrossEntropy => "cross_entropy",
        }
    }

    fn outputs(self) -> usize {
        match self {
            RelevanceVariant::Ranking => 1,
            RelevanceVariant::CrossEntropy => 2,
        }
    }
}

impl std::str::FromStr for RelevanceVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranking" => Ok(RelevanceVariant::Ranking),
            "cross_entropy" | "cross-entropy" => Ok(RelevanceVariant::CrossEntropy),
            other => Err(Error::Validation(format!("unknown relevance variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeSamplingSpec {
    /// Negatives drawn per positive.
    pub ratio: usize,
    pub seed: u64,
}

impl Default for NegativeSamplingSpec {
    fn default() -> Self {
        Self { ratio: 1, seed: 0 }
    }
}

/// For every pair, `ratio` indices of other pairs whose (trimmed) response
/// differs from its own.
pub fn sample_negative_indices(pairs: &[QueryResponsePair], spec: &NegativeSamplingSpec) -> Result<Vec<Vec<usize>>> {
    if spec.ratio == 0 {
        return Err(Error::Validation("negative ratio must be positive".into()));
    }
    let distinct: std::collections::HashSet<&str> = pairs.iter().map(|p| p.response.trim()).collect();
    if distinct.len() < 2 {
        return Err(Error::Empty(format!(
            "negative sampling needs at least 2 distinct responses, pool has {}",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = pairs.len();
    let mut out = Vec::with_capacity(n);
    for (i, p) in pairs.iter().enumerate() {
        let own = p.response.trim();
        let mut picks = Vec::with_capacity(spec.ratio);
        while picks.len() < spec.ratio {
            let mut chosen = None;
            for _ in 0..64 {
                let j = rng.random_range(0..n);
                if j != i && pairs[j].response.trim() != own {
                    chosen = Some(j);
                    break;
                }
            }
            // Rejection kept failing: choose uniformly among valid candidates.
            let j = match chosen {
                Some(j) => j,
                None => {
                    let valid: Vec<usize> = (0..n).filter(|&j| pairs[j].response.trim() != own).collect();
                    *valid.choose(&mut rng).expect("two distinct responses exist")
                }
            };
            picks.push(j);
        }
        out.push(picks);
    }
    Ok(out)
}

/// Each input pair becomes a positive (label 1) followed by `ratio`
/// negatives (label 0) that keep its query but borrow another pair's
/// response.
pub fn generate_negatives(pairs: &[QueryResponsePair], spec: &NegativeSamplingSpec) -> Result<Vec<QueryResponsePair>> {
    let negs = sample_negative_indices(pairs, spec)?;
    let mut out = Vec::with_capacity(pairs.len() * (1 + spec.ratio));
    for (p, picks) in pairs.iter().zip(negs) {
        out.push(QueryResponsePair { label: Some(1), raw_score: None, ..p.clone() });
        for (k, j) in picks.into_iter().enumerate() {
            out.push(QueryResponsePair {
                pair_id: format!("{}#neg{}", p.pair_id, k),
                query: p.query.clone(),
                response: pairs[j].response.clone(),
                raw_score: None,
                label: Some(0),
                origin_conversation: p.origin_conversation.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceConfig {
    pub train: TrainConfig,
    pub negatives: NegativeSamplingSpec,
    pub margin: f64,
}

impl RelevanceConfig {
    pub fn new(pooling: Pooling, seed: u64) -> Self {
        let mut train = TrainConfig::for_pooling(pooling);
        train.seed = seed;
        Self { train, negatives: NegativeSamplingSpec { ratio: 1, seed }, margin: DEFAULT_MARGIN }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceModel {
    pub variant: RelevanceVariant,
    pub mlp: Mlp,
    pub pooling: Pooling,
    pub backend: EmbeddingBackendSpec,
    pub seed: u64,
    pub margin: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub epoch_losses: Vec<f64>,
    /// Ranking accuracy (ranking variant) or balanced accuracy (cross-entropy)
    /// on the validation pairs after each epoch.
    pub valid_scores: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl RelevanceModel {
    pub fn new(variant: RelevanceVariant, backend: EmbeddingBackendSpec, pooling: Pooling, seed: u64) -> Self {
        Self {
            variant,
            mlp: Mlp::new(&layer_widths(backend.dimension, variant.outputs()), seed),
            pooling,
            backend,
            seed,
            margin: DEFAULT_MARGIN,
            fingerprint: String::new(),
        }
    }

    /// Relevance in `[0, 1]` of a precomputed `[query ; response]` vector.
    pub fn score_features(&self, features: &[f64]) -> f64 {
        let out = self.mlp.forward(features);
        match self.variant {
            RelevanceVariant::Ranking => nn::sigmoid(out[0]),
            RelevanceVariant::CrossEntropy => nn::softmax(&out)[1],
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (mut tensors, mut data) = (Vec::new(), Vec::new());
        checkpoint::push_mlp("mlp.", &self.mlp, &mut tensors, &mut data);
        Checkpoint {
            header: CheckpointHeader {
                kind: "relevance".into(),
                variant: Some(self.variant.name().into()),
                layer_widths: self.mlp.widths(),
                pooling: Some(self.pooling),
                backend_id: self.backend.backend_id(),
                backend: self.backend.clone(),
                seed: self.seed,
                training_fingerprint: self.fingerprint.clone(),
                extra: serde_json::json!({ "margin": self.margin }),
                tensors,
            },
            data,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("relevance")?;
        let h = &ckpt.header;
        let variant: RelevanceVariant = h
            .variant
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("relevance checkpoint without variant".into()))?
            .parse()?;
        Ok(Self {
            variant,
            mlp: checkpoint::read_mlp("mlp.", &h.layer_widths, ckpt)?,
            pooling: h.pooling.unwrap_or(Pooling::Mean),
            backend: h.backend.clone(),
            seed: h.seed,
            margin: h.extra.get("margin").and_then(|m| m.as_f64()).unwrap_or(DEFAULT_MARGIN),
            fingerprint: h.training_fingerprint.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Hinge loss `max(0, margin - pos + neg)`.
pub fn margin_loss(pos: f64, neg: f64, margin: f64) -> f64 {
    (margin - pos + neg).max(0.0)
}

/// Pre-embedded (query+positive, query+negative) feature pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

pub fn build_triples(
    backend: &dyn EmbeddingBackend,
    pooling: Pooling,
    pairs: &[QueryResponsePair],
    spec: &NegativeSamplingSpec,
) -> Result<Vec<Triple>> {
    let negs = sample_negative_indices(pairs, spec)?;
    let mut out = Vec::new();
    for (p, picks) in pairs.iter().zip(negs) {
        let positive = pair_features(backend, pooling, &p.query, &p.response)?;
        for j in picks {
            out.push(Triple {
                positive: positive.clone(),
                negative: pair_features(backend, pooling, &p.query, &pairs[j].response)?,
            });
        }
    }
    Ok(out)
}

/// Fraction of triples with `s(q, r+) > s(q, r-)`.
pub fn ranking_accuracy(model: &RelevanceModel, triples: &[Triple]) -> f64 {
    if triples.is_empty() {
        return f64::NAN;
    }
    let wins = triples
        .iter()
        .filter(|t| model.score_features(&t.positive) > model.score_features(&t.negative))
        .count();
    wins as f64 / triples.len() as f64
}

/// Minibatch Adam on the mean margin loss over squashed scores.
pub fn fit_ranking(
    mut model: RelevanceModel,
    train: &[Triple],
    valid: &[Triple],
    cfg: &TrainConfig,
    margin: f64,
) -> Result<(RelevanceModel, RelevanceReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("no training triples".into()));
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a4c_0001);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = RelevanceReport::default();
    let mut best: Option<(f64, Mlp)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.mlp.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let tp = model.mlp.forward_trace(&train[i].positive);
                let tn = model.mlp.forward_trace(&train[i].negative);
                let (sp, sn) = (nn::sigmoid(tp.output()[0]), nn::sigmoid(tn.output()[0]));
                if margin - sp + sn > 0.0 {
                    model.mlp.backward(&tp, &[-scale * sp * (1.0 - sp)], &mut grads);
                    model.mlp.backward(&tn, &[scale * sn * (1.0 - sn)], &mut grads);
                }
            }
            adam.step(model.mlp.params_mut(), grads.params());
        }
        let loss = train
            .iter()
            .map(|t| margin_loss(model.score_features(&t.positive), model.score_features(&t.negative), margin))
            .sum::<f64>()
            / train.len() as f64;
        if !loss.is_finite() || !model.mlp.all_finite() {
            return Err(Error::NonFinite { epoch, message: format!("ranking loss {loss}") });
        }
        report.epoch_losses.push(loss);
        if !valid.is_empty() {
            let acc = ranking_accuracy(&model, valid);
            report.valid_scores.push(acc);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.mlp.clone()));
                report.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, mlp)) = best {
        model.mlp = mlp;
    }
    Ok((model, report))
}

/// Trains a relevance scorer from unlabeled true pairs; negatives are drawn
/// within each pool.
pub fn train_relevance(
    train_pairs: &[QueryResponsePair],
    valid_pairs: &[QueryResponsePair],
    variant: RelevanceVariant,
    cfg: &RelevanceConfig,
    backend: &dyn EmbeddingBackend,
    spec: &EmbeddingBackendSpec,
    pooling: Pooling,
) -> Result<(RelevanceModel, RelevanceReport)> {
    if train_pairs.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if backend.dimension() != spec.dimension {
        return Err(Error::DimensionMismatch { expected: spec.dimension, got: backend.dimension() });
    }
    let mut model = RelevanceModel::new(variant, spec.clone(), pooling, cfg.train.seed);
    model.margin = cfg.margin;
    let valid_spec = NegativeSamplingSpec { seed: cfg.negatives.seed.wrapping_add(1), ..cfg.negatives };
    let (mut trained, report) = match variant {
        RelevanceVariant::Ranking => {
            let train = build_triples(backend, pooling, train_pairs, &cfg.negatives)?;
            let valid = if valid_pairs.len() >= 2 {
                build_triples(backend, pooling, valid_pairs, &valid_spec)?
            } else {
                Vec::new()
            };
            fit_ranking(model, &train, &valid, &cfg.train, cfg.margin)?
        }
        RelevanceVariant::CrossEntropy => {
            let to_examples = |pairs: &[QueryResponsePair], spec: &NegativeSamplingSpec| -> Result<Vec<Example>> {
                crate::engagement::labeled_examples(backend, pooling, &generate_negatives(pairs, spec)?)
            };
            let train = to_examples(train_pairs, &cfg.negatives)?;
            let valid = if valid_pairs.len() >= 2 { to_examples(valid_pairs, &valid_spec)? } else { Vec::new() };
            let mut tc = cfg.train.clone();
            tc.class_weights.get_or_insert(ClassWeights::UNIFORM);
            let (mlp, r) = nn::fit_softmax(model.mlp.clone(), &train, &valid, &tc)?;
            model.mlp = mlp;
            let report = RelevanceReport {
                epoch_losses: r.epoch_losses,
                valid_scores: r.valid_balanced_accuracy,
                best_epoch: r.best_epoch,
            };
            (model, report)
        }
    };
    trained.fingerprint = training_fingerprint(train_pairs, &cfg.train);
    Ok((trained, report))
}

pub fn predict_relevance(model: &RelevanceModel, backend: &dyn EmbeddingBackend, query: &str, response: &str) -> Result<f64> {
    if backend.dimension() != model.backend.dimension {
        return Err(Error::DimensionMismatch { expected: model.backend.dimension, got: backend.dimension() });
    }
    Ok(model.score_features(&pair_features(backend, model.pooling, query, response)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> Vec<QueryResponsePair> {
        (0..n).map(|i| QueryResponsePair::new(format!("p{i}"), format!("q{i}"), format!("r{i}"))).collect()
    }

    #[test]
    fn two_pairs_swap_responses() {
        let out = generate_negatives(&pool(2), &NegativeSamplingSpec::default()).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!((out[1].query.as_str(), out[1].response.as_str(), out[1].label), ("q0", "r1", Some(0)));
        assert_eq!((out[3].query.as_str(), out[3].response.as_str(), out[3].label), ("q1", "r0", Some(0)));
    }

    #[test]
    fn balanced_and_deterministic() {
        let spec = NegativeSamplingSpec { ratio: 1, seed: 42 };
        let a = generate_negatives(&pool(50), &spec).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.iter().filter(|p| p.label == Some(1)).count(), 50);
        assert_eq!(a, generate_negatives(&pool(50), &spec).unwrap());
        let three = generate_negatives(&pool(10), &NegativeSamplingSpec { ratio: 3, seed: 1 }).unwrap();
        assert_eq!(three.len(), 40);
    }

    #[test]
    fn small_pool_rejected() {
        assert!(generate_negatives(&pool(1), &NegativeSamplingSpec::default()).is_err());
        let mut same = pool(3);
        same.iter_mut().for_each(|p| p.response = "same".into());
        assert!(generate_negatives(&same, &NegativeSamplingSpec::default()).is_err());
    }

    #[test]
    fn never_reuses_the_true_response() {
        let mut pairs = pool(6);
        pairs[1].response = " r0 ".into();
        pairs[2].response = "r0".into();
        let out = generate_negatives(&pairs, &NegativeSamplingSpec { ratio: 5, seed: 3 }).unwrap();
        for (i, chunk) in out.chunks(6).enumerate() {
            let own = pairs[i].response.trim();
            assert!(chunk[1..].iter().all(|n| n.response.trim() != own));
        }
    }

    #[test]
    fn hinge_is_zero_past_margin() {
        assert_eq!(margin_loss(0.9, 0.3, 0.5), 0.0);
        assert_eq!(margin_loss(0.8, 0.3, 0.5), 0.0);
        assert!((margin_loss(0.6, 0.3, 0.5) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ranking_output_in_unit_interval() {
        let m = RelevanceModel::new(RelevanceVariant::Ranking, EmbeddingBackendSpec::hashed(4), Pooling::Mean, 0);
        assert_eq!(m.mlp.widths(), vec![8, 64, 32, 8, 1]);
        assert_eq!(m.score_features(&[0.0; 8]), 0.5);
    }
}
