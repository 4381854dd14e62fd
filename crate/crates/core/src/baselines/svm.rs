//! Feature-based linear SVM baseline.
//!
//! Features are unigram and bigram counts over the lowercased query and
//! response tokens plus the response length and its number of distinct
//! words. The classifier is an L1-loss (hinge) linear SVM solved in the dual
//! by coordinate descent, with the bias as an extra constant feature and
//! per-example box constraints `C * w_class`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QueryResponsePair;
use crate::error::{Error, Result};
use crate::nn::compute_class_weights;
use crate::text::lower_tokens;

pub const DEFAULT_C: f64 = 0.1;
pub const RESPONSE_LENGTH: &str = "__response_length__";
pub const DISTINCT_WORDS: &str = "__distinct_words__";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SvmFeatureVector {
    pub ngram_counts: BTreeMap<String, u32>,
    pub response_length: usize,
    pub distinct_words: usize,
}

fn add_ngrams(tokens: &[String], counts: &mut BTreeMap<String, u32>) {
    for t in tokens {
        *counts.entry(t.clone()).or_default() += 1;
    }
    for w in tokens.windows(2) {
        *counts.entry(format!("{} {}", w[0], w[1])).or_default() += 1;
    }
}

pub fn featurize_svm(pair: &QueryResponsePair) -> SvmFeatureVector {
    let q = lower_tokens(&pair.query);
    let r = lower_tokens(&pair.response);
    let mut ngram_counts = BTreeMap::new();
    add_ngrams(&q, &mut ngram_counts);
    add_ngrams(&r, &mut ngram_counts);
    SvmFeatureVector {
        ngram_counts,
        response_length: r.len(),
        distinct_words: r.iter().collect::<BTreeSet<_>>().len(),
    }
}

/// N-grams kept after pruning, mapped to column indices. The two length
/// features always occupy the last two columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmVocabulary {
    pub index: BTreeMap<String, usize>,
}

impl SvmVocabulary {
    /// Keeps n-grams whose total count over the training set is at least
    /// `min_count`.
    pub fn build(features: &[SvmFeatureVector], min_count: u32) -> Self {
        let mut totals: BTreeMap<&str, u32> = BTreeMap::new();
        for f in features {
            for (k, &c) in &f.ngram_counts {
                *totals.entry(k.as_str()).or_default() += c;
            }
        }
        let mut index: BTreeMap<String, usize> = totals
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .enumerate()
            .map(|(i, (k, _))| (k.to_string(), i))
            .collect();
        let n = index.len();
        index.insert(RESPONSE_LENGTH.into(), n);
        index.insert(DISTINCT_WORDS.into(), n + 1);
        Self { index }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Sparse column/value form, sorted by column.
    pub fn sparse(&self, f: &SvmFeatureVector) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = f
            .ngram_counts
            .iter()
            .filter_map(|(k, &c)| self.index.get(k).map(|&i| (i, f64::from(c))))
            .collect();
        out.push((self.index[RESPONSE_LENGTH], f.response_length as f64));
        out.push((self.index[DISTINCT_WORDS], f.distinct_words as f64));
        out.sort_by_key(|&(i, _)| i);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    /// Inverse-frequency class weighting of the box constraints.
    pub class_weighted: bool,
    pub tolerance: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub min_count: u32,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: DEFAULT_C, class_weighted: true, tolerance: 1e-4, max_iter: 2000, seed: 0, min_count: 2 }
    }
}

/// Raw linear separator over dense column indices; the bias is the last
/// entry of `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub iterations: usize,
}

impl LinearSvm {
    pub fn decision(&self, x: &[(usize, f64)]) -> f64 {
        let bias = *self.w.last().unwrap();
        x.iter().map(|&(i, v)| self.w[i] * v).sum::<f64>() + bias
    }
}

/// Dual coordinate descent for
/// `min_w 1/2 |w|^2 + sum_i C_i max(0, 1 - y_i w.x_i)` with `y_i` in {-1, +1}.
/// Each `x_i` is augmented with a constant 1 for the bias.
pub fn solve_dual(
    xs: &[Vec<(usize, f64)>],
    ys: &[f64],
    upper: &[f64],
    n_features: usize,
    tolerance: f64,
    max_iter: usize,
    seed: u64,
) -> LinearSvm {
    let n = xs.len();
    let bias_col = n_features;
    let mut w = vec![0.0; n_features + 1];
    let mut alpha = vec![0.0; n];
    let qii: Vec<f64> = xs.iter().map(|x| x.iter().map(|(_, v)| v * v).sum::<f64>() + 1.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        order.shuffle(&mut rng);
        let mut max_violation: f64 = 0.0;
        for &i in &order {
            let x = &xs[i];
            let wx = x.iter().map(|&(j, v)| w[j] * v).sum::<f64>() + w[bias_col];
            let g = ys[i] * wx - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == upper[i] {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, upper[i]);
                let d = (alpha[i] - old) * ys[i];
                if d != 0.0 {
                    for &(j, v) in x {
                        w[j] += d * v;
                    }
                    w[bias_col] += d;
                }
            }
        }
        if max_violation < tolerance {
            break;
        }
    }
    LinearSvm { w, iterations }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub vocabulary: SvmVocabulary,
    pub svm: LinearSvm,
    pub c: f64,
}

#[derive(Serialize, Deserialize)]
struct SvmJson {
    c: f64,
    bias: f64,
    weights: BTreeMap<String, f64>,
}

impl SvmModel {
    pub fn decision_function(&self, f: &SvmFeatureVector) -> f64 {
        self.svm.decision(&self.vocabulary.sparse(f))
    }

    pub fn predict(&self, f: &SvmFeatureVector) -> u8 {
        u8::from(self.decision_function(f) > 0.0)
    }

    pub fn predict_pair(&self, pair: &QueryResponsePair) -> u8 {
        self.predict(&featurize_svm(pair))
    }

    /// JSON with feature weights in sorted key order.
    pub fn to_json(&self) -> Result<String> {
        let weights = self.vocabulary.index.iter().map(|(k, &i)| (k.clone(), self.svm.w[i])).collect();
        let doc = SvmJson { c: self.c, bias: *self.svm.w.last().unwrap(), weights };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: SvmJson = serde_json::from_str(s)?;
        let mut index = BTreeMap::new();
        let mut w = Vec::with_capacity(doc.weights.len() + 1);
        for (i, (k, v)) in doc.weights.into_iter().enumerate() {
            index.insert(k, i);
            w.push(v);
        }
        if !index.contains_key(RESPONSE_LENGTH) || !index.contains_key(DISTINCT_WORDS) {
            return Err(Error::Checkpoint("SVM model lacks the length features".into()));
        }
        w.push(doc.bias);
        Ok(Self { vocabulary: SvmVocabulary { index }, svm: LinearSvm { w, iterations: 0 }, c: doc.c })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Trains with optional per-example weights multiplying each box constraint.
pub fn train_svm_weighted(
    features: &[SvmFeatureVector],
    labels: &[u8],
    sample_weights: Option<&[f64]>,
    cfg: &SvmConfig,
) -> Result<SvmModel> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: features.len(), got: labels.len() });
    }
    let class_w = compute_class_weights(labels)?;
    let vocabulary = SvmVocabulary::build(features, cfg.min_count);
    let xs: Vec<Vec<(usize, f64)>> = features.iter().map(|f| vocabulary.sparse(f)).collect();
    let ys: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let upper: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let cw = if cfg.class_weighted { class_w.of(l) } else { 1.0 };
            cfg.c * cw * sample_weights.map_or(1.0, |s| s[i])
        })
        .collect();
    let svm = solve_dual(&xs, &ys, &upper, vocabulary.len(), cfg.tolerance, cfg.max_iter, cfg.seed);
    Ok(SvmModel { vocabulary, svm, c: cfg.c })
}

pub fn train_svm(features: &[SvmFeatureVector], labels: &[u8], cfg: &SvmConfig) -> Result<SvmModel> {
    train_svm_weighted(features, labels, None, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(counts: &[(&str, u32)]) -> SvmFeatureVector {
        SvmFeatureVector {
            ngram_counts: counts.iter().map(|(k, c)| (k.to_string(), *c)).collect(),
            response_length: 0,
            distinct_words: 0,
        }
    }

    #[test]
    fn featurize_examples() {
        let f = featurize_svm(&QueryResponsePair::new("1", "", "good good day"));
        assert_eq!((f.response_length, f.distinct_words), (3, 2));
        let e = featurize_svm(&QueryResponsePair::new("2", "", ""));
        assert_eq!((e.response_length, e.distinct_words), (0, 0));
        assert!(e.ngram_counts.is_empty());
        let ab = featurize_svm(&QueryResponsePair::new("3", "a b", "b c"));
        let expect: BTreeMap<String, u32> =
            [("a", 1), ("b", 2), ("c", 1), ("a b", 1), ("b c", 1)].iter().map(|(k, c)| (k.to_string(), *c)).collect();
        assert_eq!(ab.ngram_counts, expect);
    }

    #[test]
    fn vocabulary_prunes_rare_ngrams() {
        let v = SvmVocabulary::build(&[fv(&[("x", 1), ("y", 2)]), fv(&[("x", 1), ("z", 1)])], 2);
        assert!(v.index.contains_key("x") && v.index.contains_key("y"));
        assert!(!v.index.contains_key("z"));
        assert_eq!(v.len(), 4);
    }

    fn toy() -> (Vec<SvmFeatureVector>, Vec<u8>) {
        let mut fs = Vec::new();
        let mut ls = Vec::new();
        for i in 0..10u32 {
            fs.push(fv(&[("a", 3 + i % 3), ("b", 1)]));
            ls.push(1);
            fs.push(fv(&[("a", 1), ("b", 3 + i % 2)]));
            ls.push(0);
        }
        (fs, ls)
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let (fs, ls) = toy();
        let m = train_svm(&fs, &ls, &SvmConfig { c: 10.0, ..Default::default() }).unwrap();
        let preds: Vec<u8> = fs.iter().map(|f| m.predict(f)).collect();
        assert_eq!(crate::stats::balanced_accuracy(&ls, &preds).unwrap(), 1.0);
        let with_default_c = train_svm(&fs, &ls, &SvmConfig::default()).unwrap();
        let preds: Vec<u8> = fs.iter().map(|f| with_default_c.predict(f)).collect();
        assert_eq!(crate::stats::balanced_accuracy(&ls, &preds).unwrap(), 1.0);
    }

    #[test]
    fn flipped_labels_negate_decisions() {
        let (fs, ls) = toy();
        let flipped: Vec<u8> = ls.iter().map(|l| 1 - l).collect();
        let cfg = SvmConfig::default();
        let a = train_svm(&fs, &ls, &cfg).unwrap();
        let b = train_svm(&fs, &flipped, &cfg).unwrap();
        for f in &fs {
            assert!((a.decision_function(f) + b.decision_function(f)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_rejected() {
        let (fs, _) = toy();
        assert!(train_svm(&fs, &vec![1; fs.len()], &SvmConfig::default()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let (fs, ls) = toy();
        let m = train_svm(&fs, &ls, &SvmConfig::default()).unwrap();
        let json = m.to_json().unwrap();
        let back = SvmModel::from_json(&json).unwrap();
        for f in &fs {
            assert!((m.decision_function(f) - back.decision_function(f)).abs() < 1e-12);
        }
        let keys: Vec<&String> = back.vocabulary.index.keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
