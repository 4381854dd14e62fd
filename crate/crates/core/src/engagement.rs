//! Utterance-level engagement classifier: pooled query and response vectors
//! are concatenated and fed to a 64-32-8 tanh MLP with a two-way softmax
//! head. The engagement score is the probability of the engaging class.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint, CheckpointHeader};
use crate::corpus::QueryResponsePair;
use crate::embedding::{embed_pooled, EmbeddingBackend, EmbeddingBackendSpec, Pooling, UtteranceVector};
use crate::error::{Error, Result};
use crate::nn::{self, Example, Mlp, TrainConfig, TrainReport};
use crate::stats;

pub const HIDDEN_WIDTHS: [usize; 3] = [64, 32, 8];

/// Concatenates `[query ; response]`.
pub fn build_features(query: &UtteranceVector, response: &UtteranceVector) -> Result<Vec<f64>> {
    if query.dim() != response.dim() {
        return Err(Error::DimensionMismatch { expected: query.dim(), got: response.dim() });
    }
    Ok(query.values.iter().chain(&response.values).map(|&v| f64::from(v)).collect())
}

/// `[2d, 64, 32, 8, outputs]`.
pub fn layer_widths(embedding_dim: usize, outputs: usize) -> Vec<usize> {
    let mut w = vec![2 * embedding_dim];
    w.extend(HIDDEN_WIDTHS);
    w.push(outputs);
    w
}

pub fn pair_features(backend: &dyn EmbeddingBackend, pooling: Pooling, query: &str, response: &str) -> Result<Vec<f64>> {
    let q = embed_pooled(backend, query, pooling)?;
    let r = embed_pooled(backend, response, pooling)?;
    build_features(&q, &r)
}

/// Embeds labeled pairs into training examples.
pub fn labeled_examples(backend: &dyn EmbeddingBackend, pooling: Pooling, pairs: &[QueryResponsePair]) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|p| {
            let label = p
                .label
                .ok_or_else(|| Error::Validation(format!("pair {} has no label", p.pair_id)))?;
            Ok(Example { features: pair_features(backend, pooling, &p.query, &p.response)?, label })
        })
        .collect()
}

/// SHA-256 over the training pair ids, labels and configuration.
pub fn training_fingerprint(pairs: &[QueryResponsePair], cfg: &TrainConfig) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.pair_id.as_bytes());
        h.update([0, p.label.unwrap_or(255)]);
    }
    h.update(serde_json::to_vec(cfg).unwrap_or_default());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngagementModel {
    pub mlp: Mlp,
    pub pooling: Pooling,
    pub backend: EmbeddingBackendSpec,
    pub seed: u64,
    pub fingerprint: String,
}

impl EngagementModel {
    /// Freshly initialized model for `backend`'s embedding width.
    pub fn new(backend: EmbeddingBackendSpec, pooling: Pooling, seed: u64) -> Self {
        let mlp = Mlp::new(&layer_widths(backend.dimension, 2), seed);
        Self { mlp, pooling, backend, seed, fingerprint: String::new() }
    }

    /// Probability of the engaging class for a precomputed feature vector.
    pub fn predict_features(&self, features: &[f64]) -> f64 {
        nn::positive_probability(&self.mlp, features)
    }

    /// Both class probabilities.
    pub fn distribution(&self, features: &[f64]) -> [f64; 2] {
        let p = nn::softmax(&self.mlp.forward(features));
        [p[0], p[1]]
    }

    fn check_backend(&self, backend: &dyn EmbeddingBackend) -> Result<()> {
        if backend.dimension() != self.backend.dimension {
            return Err(Error::DimensionMismatch { expected: self.backend.dimension, got: backend.dimension() });
        }
        if backend.backend_id() != self.backend.backend_id() {
            log::warn!(
                "model was trained with backend {} but is scored with {}",
                self.backend.backend_id(),
                backend.backend_id()
            );
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (mut tensors, mut data) = (Vec::new(), Vec::new());
        checkpoint::push_mlp("mlp.", &self.mlp, &mut tensors, &mut data);
        Checkpoint {
            header: CheckpointHeader {
                kind: "engagement".into(),
                variant: None,
                layer_widths: self.mlp.widths(),
                pooling: Some(self.pooling),
                backend_id: self.backend.backend_id(),
                backend: self.backend.clone(),
                seed: self.seed,
                training_fingerprint: self.fingerprint.clone(),
                extra: serde_json::Value::Null,
                tensors,
            },
            data,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("engagement")?;
        let h = &ckpt.header;
        let mlp = checkpoint::read_mlp("mlp.", &h.layer_widths, ckpt)?;
        Ok(Self {
            mlp,
            pooling: h.pooling.unwrap_or(Pooling::Mean),
            backend: h.backend.clone(),
            seed: h.seed,
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

/// Trains on precomputed examples starting from `model`'s weights.
pub fn train_on_examples(
    model: &EngagementModel,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
) -> Result<(EngagementModel, TrainReport)> {
    let (mlp, report) = nn::fit_softmax(model.mlp.clone(), train, valid, cfg)?;
    Ok((EngagementModel { mlp, ..model.clone() }, report))
}

/// Trains a new classifier on labeled pairs, selecting the epoch with the
/// best validation balanced accuracy.
pub fn train(
    train_pairs: &[QueryResponsePair],
    valid_pairs: &[QueryResponsePair],
    cfg: &TrainConfig,
    backend: &dyn EmbeddingBackend,
    spec: &EmbeddingBackendSpec,
    pooling: Pooling,
) -> Result<(EngagementModel, TrainReport)> {
    if train_pairs.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let model = EngagementModel::new(spec.clone(), pooling, cfg.seed);
    model.check_backend(backend)?;
    let train = labeled_examples(backend, pooling, train_pairs)?;
    let valid = labeled_examples(backend, pooling, valid_pairs)?;
    let (mut trained, report) = train_on_examples(&model, &train, &valid, cfg)?;
    trained.fingerprint = training_fingerprint(train_pairs, cfg);
    Ok((trained, report))
}

pub fn predict_engagement(model: &EngagementModel, backend: &dyn EmbeddingBackend, query: &str, response: &str) -> Result<f64> {
    model.check_backend(backend)?;
    let features = pair_features(backend, model.pooling, query, response)?;
    Ok(model.predict_features(&features))
}

/// Pairs reserved for evaluation; fine-tuning data may not touch them.
#[derive(Debug, Clone, Default)]
pub struct LeakageGuard {
    ids: HashSet<String>,
    texts: HashSet<(String, String)>,
}

impl LeakageGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, pairs: &[QueryResponsePair]) {
        for p in pairs {
            self.ids.insert(p.pair_id.clone());
            self.texts.insert(text_key(p));
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fails when any pair matches a registered one by id or by text.
    pub fn check(&self, pairs: &[QueryResponsePair]) -> Result<()> {
        let leaked: Vec<&QueryResponsePair> = pairs
            .iter()
            .filter(|p| self.ids.contains(&p.pair_id) || self.texts.contains(&text_key(p)))
            .collect();
        match leaked.first() {
            None => Ok(()),
            Some(first) => Err(Error::Leakage { count: leaked.len(), first: first.pair_id.clone() }),
        }
    }
}

fn text_key(p: &QueryResponsePair) -> (String, String) {
    (p.query.trim().to_lowercase(), p.response.trim().to_lowercase())
}

/// Continues training every layer from the source-domain weights on a small
/// target-domain set. An empty set returns the model unchanged.
pub fn finetune(
    model: &EngagementModel,
    small_pairs: &[QueryResponsePair],
    valid_pairs: &[QueryResponsePair],
    cfg: &TrainConfig,
    backend: &dyn EmbeddingBackend,
    guard: &LeakageGuard,
) -> Result<(EngagementModel, TrainReport)> {
    guard.check(small_pairs)?;
    guard.check(valid_pairs)?;
    if small_pairs.is_empty() {
        return Ok((model.clone(), TrainReport::default()));
    }
    model.check_backend(backend)?;
    let train = labeled_examples(backend, model.pooling, small_pairs)?;
    let valid = labeled_examples(backend, model.pooling, valid_pairs)?;
    let (mut tuned, report) = train_on_examples(model, &train, &valid, cfg)?;
    tuned.fingerprint = format!("{}+{}", model.fingerprint, training_fingerprint(small_pairs, cfg));
    Ok((tuned, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEvaluation {
    pub balanced_accuracy: f64,
    pub roc_auc: f64,
    pub n: usize,
}

/// Balanced accuracy at threshold 0.5 and ROC AUC from probability scores.
pub fn evaluate_scores(labels: &[u8], probabilities: &[f64]) -> Result<ClassifierEvaluation> {
    let preds: Vec<u8> = probabilities.iter().map(|&p| u8::from(p >= 0.5)).collect();
    Ok(ClassifierEvaluation {
        balanced_accuracy: stats::balanced_accuracy(labels, &preds)?,
        roc_auc: stats::roc_auc(labels, probabilities)?,
        n: labels.len(),
    })
}

pub fn evaluate_examples(model: &EngagementModel, examples: &[Example]) -> Result<ClassifierEvaluation> {
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let probs: Vec<f64> = examples.iter().map(|e| model.predict_features(&e.features)).collect();
    evaluate_scores(&labels, &probs)
}

pub fn evaluate_classifier(
    model: &EngagementModel,
    backend: &dyn EmbeddingBackend,
    pairs: &[QueryResponsePair],
) -> Result<ClassifierEvaluation> {
    model.check_backend(backend)?;
    evaluate_examples(model, &labeled_examples(backend, model.pooling, pairs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedEmbeddings;

    fn uv(v: &[f32]) -> UtteranceVector {
        UtteranceVector { values: v.to_vec(), pooling: Pooling::Mean }
    }

    #[test]
    fn feature_concatenation() {
        assert_eq!(build_features(&uv(&[1.0, 2.0]), &uv(&[3.0, 4.0])).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let f = build_features(&uv(&[0.5; 768]), &uv(&[0.5; 768])).unwrap();
        assert_eq!(f.len(), 1536);
        assert!(f.iter().eq(f.iter().rev()));
        assert!(build_features(&uv(&[1.0]), &uv(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn topology() {
        let m = EngagementModel::new(EmbeddingBackendSpec::hashed(300), Pooling::Max, 0);
        assert_eq!(m.mlp.widths(), vec![600, 64, 32, 8, 2]);
    }

    #[test]
    fn untrained_model_scores_half() {
        let be = HashedEmbeddings::new(8);
        let m = EngagementModel::new(EmbeddingBackendSpec::hashed(8), Pooling::Mean, 3);
        assert_eq!(predict_engagement(&m, &be, "how are you", "fine thanks").unwrap(), 0.5);
        assert!(predict_engagement(&m, &be, " ", "fine").is_err());
    }

    #[test]
    fn evaluation_examples() {
        let e = evaluate_scores(&[1, 1, 0, 0], &[0.9, 0.8, 0.1, 0.2]).unwrap();
        assert_eq!((e.balanced_accuracy, e.roc_auc), (1.0, 1.0));
        let c = evaluate_scores(&[1, 0, 0, 1], &[0.5; 4]).unwrap();
        assert_eq!(c.roc_auc, 0.5);
        assert_eq!(c.balanced_accuracy, 0.5);
        assert!(evaluate_scores(&[1, 1], &[0.2, 0.3]).is_err());
    }

    #[test]
    fn leakage_guard() {
        let mut guard = LeakageGuard::new();
        guard.register(&[QueryResponsePair::new("e1", "Hi there", "Hello")]);
        let clean = [QueryResponsePair::new("t1", "a", "b").with_label(1)];
        assert!(guard.check(&clean).is_ok());
        let by_text = [QueryResponsePair::new("t2", "hi there ", "hello").with_label(0)];
        assert!(matches!(guard.check(&by_text), Err(Error::Leakage { count: 1, .. })));
        let by_id = [QueryResponsePair::new("e1", "x", "y").with_label(0)];
        assert!(guard.check(&by_id).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = EngagementModel::new(EmbeddingBackendSpec::hashed(4), Pooling::Mean, 5);
        m.mlp.layers[3] = crate::nn::Dense::uniform(8, 2, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2));
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = EngagementModel::load(&path).unwrap();
        let x = [0.1, -0.2, 0.3, 0.4, 0.0, 0.5, -0.6, 0.7];
        assert!((back.predict_features(&x) - m.predict_features(&x)).abs() < 1e-5);
        assert_eq!(back.pooling, Pooling::Mean);
    }
}
