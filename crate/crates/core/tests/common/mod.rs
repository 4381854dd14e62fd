//! Brute-force reference implementations and synthetic fixtures shared by
//! the integration tests. Nothing here calls into the library's statistics.
#![allow(dead_code)]

use std::collections::HashMap;

use engage_core::corpus::QueryResponsePair;
use engage_core::embedding::StaticEmbeddings;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Pearson r from mean-centred sums, accumulated back to front.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().rev().sum::<f64>() / n;
    let my = y.iter().rev().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in (0..x.len()).rev() {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

/// Rank of each value: number of smaller values plus the mean position
/// among its ties, found by counting over all elements.
pub fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    oracle_pearson(&oracle_ranks(x), &oracle_ranks(y))
}

/// Fraction of (positive, negative) score pairs ordered correctly, ties
/// worth one half.
pub fn oracle_auc(labels: &[u8], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            total += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / total
}

pub fn oracle_balanced_accuracy(labels: &[u8], preds: &[u8]) -> f64 {
    let mut tp = 0.0;
    let mut tn = 0.0;
    let mut p = 0.0;
    let mut n = 0.0;
    for (&l, &q) in labels.iter().zip(preds) {
        if l == 1 {
            p += 1.0;
            if q == 1 {
                tp += 1.0;
            }
        } else {
            n += 1.0;
            if q == 0 {
                tn += 1.0;
            }
        }
    }
    0.5 * (tp / p + tn / n)
}

/// Kappa from a full k x k contingency table over ratings 1..=k.
pub fn oracle_kappa(a: &[u8], b: &[u8], k: usize) -> f64 {
    let mut table = vec![vec![0.0; k]; k];
    for (&x, &y) in a.iter().zip(b) {
        table[x as usize - 1][y as usize - 1] += 1.0;
    }
    let n = a.len() as f64;
    let po: f64 = (0..k).map(|i| table[i][i]).sum::<f64>() / n;
    let pe: f64 = (0..k)
        .map(|i| {
            let row: f64 = table[i].iter().sum();
            let col: f64 = table.iter().map(|r| r[i]).sum();
            row * col
        })
        .sum::<f64>()
        / (n * n);
    (po - pe) / (1.0 - pe)
}

/// Asymptotic covariance of two correlations sharing variable `j`
/// (Pearson-Filon), in the form used for Fisher-z differences.
pub fn pearson_filon_psi(r_jk: f64, r_jh: f64, r_kh: f64) -> f64 {
    r_kh * (1.0 - r_jk * r_jk - r_jh * r_jh) - 0.5 * r_jk * r_jh * (1.0 - r_jk * r_jk - r_jh * r_jh - r_kh * r_kh)
}

/// z for `H0: rho_jk = rho_jh` with both correlations in the covariance
/// term replaced by `tanh(mean(atanh r))`.
pub fn oracle_dependent_z(r_jk: f64, r_jh: f64, r_kh: f64, n: usize) -> f64 {
    let rbar = ((r_jk.atanh() + r_jh.atanh()) / 2.0).tanh();
    let cov = pearson_filon_psi(rbar, rbar, r_kh) / ((1.0 - rbar * rbar) * (1.0 - rbar * rbar));
    (r_jk.atanh() - r_jh.atanh()) / ((2.0 - 2.0 * cov) / (n as f64 - 3.0)).sqrt()
}

/// Samples `n` rows of a zero-mean trivariate normal with unit variances and
/// the given correlation matrix (lower Cholesky factor computed inline).
pub fn trivariate_normal(corr: [[f64; 3]; 3], n: usize, rng: &mut impl Rng) -> [Vec<f64>; 3] {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j { (corr[i][i] - s).sqrt() } else { (corr[i][j] - s) / l[j][j] };
        }
    }
    let mut out = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for _ in 0..n {
        let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        for i in 0..3 {
            out[i].push((0..=i).map(|k| l[i][k] * e[k]).sum());
        }
    }
    out
}

/// Static embedding table for synthetic text fixtures.
///
/// Word `pos{i}` / `neg{i}` carries +1 / -1 on coordinate `axis`, word
/// `fill{i}` is noise only. Every coordinate gets Gaussian noise of scale
/// `noise`.
pub struct Lexicon {
    pub dim: usize,
    pub words: HashMap<String, Vec<f32>>,
}

impl Lexicon {
    pub fn new(dim: usize) -> Self {
        Self { dim, words: HashMap::new() }
    }

    pub fn add_polar(&mut self, prefix: &str, count: usize, axis: usize, sign: f32, noise: f32, rng: &mut impl Rng) {
        for i in 0..count {
            let mut v: Vec<f32> = (0..self.dim).map(|_| noise * Distribution::<f32>::sample(&StandardNormal, &mut *rng)).collect();
            v[axis] = sign * (1.0 + 0.2 * rng.random::<f32>());
            self.words.insert(format!("{prefix}{i}"), v);
        }
    }

    pub fn add_noise(&mut self, prefix: &str, count: usize, noise: f32, rng: &mut impl Rng) {
        for i in 0..count {
            let v = (0..self.dim).map(|_| noise * Distribution::<f32>::sample(&StandardNormal, &mut *rng)).collect();
            self.words.insert(format!("{prefix}{i}"), v);
        }
    }

    pub fn backend(&self, id: &str) -> StaticEmbeddings {
        StaticEmbeddings::from_map(id, self.dim, self.words.clone()).unwrap()
    }
}

/// `len` words drawn from `{prefix}0 .. {prefix}{count-1}`.
pub fn sentence(prefix: &str, count: usize, len: usize, rng: &mut impl Rng) -> String {
    (0..len).map(|_| format!("{prefix}{}", rng.random_range(0..count))).collect::<Vec<_>>().join(" ")
}

/// Labeled pairs whose response draws most of its words from `pos*` when
/// engaging and from `neg*` otherwise; queries are filler. About one pair
/// in `1 / positive_rate` is engaging.
pub fn polar_pairs(
    tag: &str,
    n: usize,
    positive_rate: f64,
    pos: &str,
    neg: &str,
    vocab: usize,
    rng: &mut impl Rng,
) -> Vec<QueryResponsePair> {
    (0..n)
        .map(|i| {
            let label = u8::from(rng.random::<f64>() < positive_rate);
            let query = sentence("fill", vocab, 5, rng);
            let signal = sentence(if label == 1 { pos } else { neg }, vocab, 4, rng);
            let response = format!("{signal} {}", sentence("fill", vocab, 2, rng));
            QueryResponsePair::new(format!("{tag}-{i}"), query, response).with_label(label)
        })
        .collect()
}
