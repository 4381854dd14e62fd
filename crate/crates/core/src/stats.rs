//! Aggregation, score combination, correlation, agreement and significance
//! statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::corpus::AnnotationRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMethod {
    Min,
    Max,
    Mean,
}

impl AggregateMethod {
    pub const ALL: [AggregateMethod; 3] = [AggregateMethod::Min, AggregateMethod::Max, AggregateMethod::Mean];

    pub fn name(self) -> &'static str {
        match self {
            AggregateMethod::Min => "min",
            AggregateMethod::Max => "max",
            AggregateMethod::Mean => "mean",
        }
    }
}

pub fn aggregate(scores: &[f64], method: AggregateMethod) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("cannot aggregate an empty score list".into()));
    }
    Ok(match method {
        AggregateMethod::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
        AggregateMethod::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        AggregateMethod::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
    })
}

fn check_unit(x: f64, what: &str) -> Result<f64> {
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(Error::Validation(format!("{what} score {x} is outside [0, 1]")))
    }
}

/// Mean of a relevance and an engagement score.
pub fn combine(relevance: f64, engagement: f64) -> Result<f64> {
    let r = check_unit(relevance, "relevance")?;
    let e = check_unit(engagement, "engagement")?;
    Ok((r + e) / 2.0)
}

/// Rounds to `decimals` places with ties going toward +inf. Values
/// within 1e-9 (relative) below a tie count as the tie, so binary
/// representations like `0.7949999999999999` round to `0.80`.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = x * scale;
    let nudge = 1e-9 * scaled.abs().max(1.0);
    (scaled + 0.5 + nudge).floor() / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub coefficient: f64,
    pub p_value: f64,
    pub n: usize,
}

fn check_paired(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() < 3 {
        return Err(Error::Validation(format!("correlation needs n >= 3, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("correlation inputs must be finite".into()));
    }
    Ok(())
}

fn pearson_coefficient(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with a zero-variance variable".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value of a correlation coefficient under the t-distribution
/// with `n - 2` degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

/// Sample Pearson correlation with a two-sided t-test p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_paired(x, y)?;
    let r = pearson_coefficient(x, y)?;
    Ok(Correlation { coefficient: r, p_value: correlation_p_value(r, x.len()), n: x.len() })
}

/// 1-based ranks; tied values share the average of their positions.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson over midranks, p-value from the same t
/// approximation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_paired(x, y)?;
    let rho = pearson_coefficient(&midranks(x), &midranks(y))?;
    Ok(Correlation { coefficient: rho, p_value: correlation_p_value(rho, x.len()), n: x.len() })
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!("{neg} negatives, {pos} positives")));
    }
    Ok((neg, pos))
}

/// Mean of the per-class recalls.
pub fn balanced_accuracy(labels: &[u8], predictions: &[u8]) -> Result<f64> {
    if labels.len() != predictions.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: predictions.len() });
    }
    let (neg, pos) = class_counts(labels)?;
    let mut hits = [0usize; 2];
    for (&l, &p) in labels.iter().zip(predictions) {
        if l == p {
            hits[l as usize] += 1;
        }
    }
    Ok((hits[0] as f64 / neg as f64 + hits[1] as f64 / pos as f64) / 2.0)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (rank-sum form).
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: scores.len() });
    }
    let (neg, pos) = class_counts(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Unweighted categorical Cohen's kappa for two raters over the same items.
pub fn cohen_kappa<T: Ord + Clone>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Err(Error::Empty("kappa over zero items".into()));
    }
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut ca: BTreeMap<&T, usize> = BTreeMap::new();
    let mut cb: BTreeMap<&T, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let expected: f64 = ca
        .iter()
        .map(|(k, &na)| na as f64 / n * cb.get(k).copied().unwrap_or(0) as f64 / n)
        .sum();
    if (1.0 - expected).abs() < 1e-15 {
        return Err(Error::Undefined("kappa with chance agreement 1".into()));
    }
    Ok((observed - expected) / (1.0 - expected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub mean_pairwise_kappa: f64,
    pub mean_pairwise_pearson: f64,
    pub annotators: usize,
    pub items: usize,
    /// Annotator pairs contributing to each mean.
    pub kappa_pairs: usize,
    pub pearson_pairs: usize,
}

/// Averages kappa and Pearson over every annotator pair sharing at least two
/// items. Pairs where a statistic is undefined (constant ratings) are left
/// out of that statistic's mean.
pub fn mean_pairwise_agreement(records: &[AnnotationRecord]) -> Result<AgreementReport> {
    let mut by_annotator: BTreeMap<&str, BTreeMap<&str, u8>> = BTreeMap::new();
    let mut items = BTreeSet::new();
    for r in records {
        by_annotator.entry(&r.annotator_id).or_default().insert(&r.pair_id, r.rating);
        items.insert(r.pair_id.as_str());
    }
    let annotators: Vec<_> = by_annotator.iter().collect();
    let (mut kappas, mut pearsons) = (Vec::new(), Vec::new());
    for i in 0..annotators.len() {
        for j in i + 1..annotators.len() {
            let (a, b) = (annotators[i].1, annotators[j].1);
            let (ra, rb): (Vec<u8>, Vec<u8>) =
                a.iter().filter_map(|(item, &x)| b.get(item).map(|&y| (x, y))).unzip();
            if ra.len() < 2 {
                continue;
            }
            if let Ok(k) = cohen_kappa(&ra, &rb) {
                kappas.push(k);
            }
            let fa: Vec<f64> = ra.iter().map(|&v| f64::from(v)).collect();
            let fb: Vec<f64> = rb.iter().map(|&v| f64::from(v)).collect();
            if let Ok(r) = pearson_coefficient(&fa, &fb) {
                pearsons.push(r);
            }
        }
    }
    if kappas.is_empty() {
        return Err(Error::Undefined("no annotator pair shares two items with defined kappa".into()));
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(AgreementReport {
        mean_pairwise_kappa: mean(&kappas),
        mean_pairwise_pearson: mean(&pearsons),
        annotators: annotators.len(),
        items: items.len(),
        kappa_pairs: kappas.len(),
        pearson_pairs: pearsons.len(),
    })
}

/// Test statistic for two dependent correlations sharing one variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependentTest {
    /// Steiger's z with the back-transformed mean Fisher z in the
    /// covariance term (Hittner, May and Silver, 2003).
    #[default]
    Hittner,
    /// Steiger (1980) z with the arithmetic mean of the two correlations
    /// in the covariance term.
    Steiger,
    /// Meng, Rosenthal and Rubin (1992) z.
    Meng,
}

impl std::str::FromStr for DependentTest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hittner" => Ok(Self::Hittner),
            "steiger" => Ok(Self::Steiger),
            "meng" => Ok(Self::Meng),
            other => Err(Error::Validation(format!("unknown dependent correlation test {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceTest {
    pub z: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: DependentTest,
}

fn two_sided_normal_p(z: f64) -> f64 {
    // The true tail is positive; keep it representable.
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Compares `r_jk` and `r_jh`, two correlations with the common variable
/// `j` (the human judgements), given the correlation `r_kh` between the two
/// competing metrics and the sample size `n`.
pub fn dependent_correlation_test(r_jk: f64, r_jh: f64, r_kh: f64, n: usize) -> Result<SignificanceTest> {
    dependent_correlation_test_with(r_jk, r_jh, r_kh, n, DependentTest::default())
}

pub fn dependent_correlation_test_with(
    r_jk: f64,
    r_jh: f64,
    r_kh: f64,
    n: usize,
    method: DependentTest,
) -> Result<SignificanceTest> {
    if [r_jk, r_jh, r_kh].iter().any(|r| !r.is_finite() || r.abs() >= 1.0) {
        return Err(Error::Validation(format!(
            "dependent correlation test needs |r| < 1, got ({r_jk}, {r_jh}, {r_kh})"
        )));
    }
    if n < 4 {
        return Err(Error::Validation(format!("dependent correlation test needs n >= 4, got {n}")));
    }
    if r_jk == r_jh {
        return Ok(SignificanceTest { z: 0.0, p_value: 1.0, n, method });
    }
    let (z1, z2) = (r_jk.atanh(), r_jh.atanh());
    let nf = n as f64;
    let z = match method {
        DependentTest::Hittner | DependentTest::Steiger => {
            let rm = if method == DependentTest::Hittner { ((z1 + z2) / 2.0).tanh() } else { (r_jk + r_jh) / 2.0 };
            let rm2 = rm * rm;
            let psi = r_kh * (1.0 - 2.0 * rm2) - 0.5 * rm2 * (1.0 - 2.0 * rm2 - r_kh * r_kh);
            let c = psi / ((1.0 - rm2) * (1.0 - rm2));
            (z1 - z2) * (nf - 3.0).sqrt() / (2.0 - 2.0 * c).sqrt()
        }
        DependentTest::Meng => {
            let rbar2 = (r_jk * r_jk + r_jh * r_jh) / 2.0;
            let f = ((1.0 - r_kh) / (2.0 * (1.0 - rbar2))).min(1.0);
            let h = (1.0 - f * rbar2) / (1.0 - rbar2);
            (z1 - z2) * ((nf - 3.0) / (2.0 * (1.0 - r_kh) * h)).sqrt()
        }
    };
    if !z.is_finite() {
        // Happens when the three correlations cannot come from one
        // positive-definite correlation matrix.
        return Err(Error::Undefined(format!("degenerate covariance for ({r_jk}, {r_jh}, {r_kh})")));
    }
    let p_value = two_sided_normal_p(z);
    Ok(SignificanceTest { z, p_value, n, method })
}

/// One evaluated pair; every score lives on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair_id: String,
    #[serde(default)]
    pub query: String,
    #[serde(default)]
    pub response: String,
    pub relevance: Option<f64>,
    pub engagement: Option<f64>,
    pub combined: Option<f64>,
    pub human: Option<f64>,
}

impl ScoredPair {
    /// Builds a pair, deriving `combined` when both components are present.
    pub fn new(pair_id: impl Into<String>, relevance: Option<f64>, engagement: Option<f64>, human: Option<f64>) -> Result<Self> {
        let combined = match (relevance, engagement) {
            (Some(r), Some(e)) => Some(combine(r, e)?),
            _ => None,
        };
        Ok(Self {
            pair_id: pair_id.into(),
            query: String::new(),
            response: String::new(),
            relevance,
            engagement,
            combined,
            human,
        })
    }

    pub fn metric(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Relevance => self.relevance,
            Metric::Engagement => self.engagement,
            Metric::Combined => self.combined,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Relevance,
    Engagement,
    Combined,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Relevance, Metric::Engagement, Metric::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Relevance => "relevance",
            Metric::Engagement => "engagement",
            Metric::Combined => "combined",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown metric '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric: String,
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub n: usize,
}

/// Extracts the `(metric, human)` columns; any missing value is an error.
pub fn metric_columns(scored: &[ScoredPair], metric: Metric) -> Result<(Vec<f64>, Vec<f64>)> {
    scored
        .iter()
        .map(|p| {
            let m = p.metric(metric).ok_or_else(|| {
                Error::Validation(format!("pair {} has no {} score", p.pair_id, metric.name()))
            })?;
            let h = p
                .human
                .ok_or_else(|| Error::Validation(format!("pair {} has no human score", p.pair_id)))?;
            Ok((m, h))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

pub fn build_report(scored: &[ScoredPair], metric: Metric) -> Result<CorrelationReport> {
    let (m, h) = metric_columns(scored, metric)?;
    let p = pearson(&m, &h)?;
    let s = spearman(&m, &h)?;
    Ok(CorrelationReport {
        metric: metric.name().into(),
        pearson_r: p.coefficient,
        pearson_p: p.p_value,
        spearman_rho: s.coefficient,
        spearman_p: s.p_value,
        n: p.n,
    })
}

/// Tests whether `candidate` correlates with the human column significantly
/// differently from `baseline` (Pearson correlations).
pub fn compare_metrics(scored: &[ScoredPair], candidate: Metric, baseline: Metric, method: DependentTest) -> Result<SignificanceTest> {
    let (c, h) = metric_columns(scored, candidate)?;
    let (b, _) = metric_columns(scored, baseline)?;
    let r_jk = pearson(&h, &c)?.coefficient;
    let r_jh = pearson(&h, &b)?.coefficient;
    let r_kh = pearson(&c, &b)?.coefficient;
    dependent_correlation_test_with(r_jk, r_jh, r_kh, scored.len(), method)
}

/// Writes scored pairs as CSV with columns
/// `pair_id,query,response,relevance,engagement,combined,human`; missing
/// scores are empty cells.
pub fn write_scored_csv(path: impl AsRef<Path>, scored: &[ScoredPair]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in scored {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scored_csv(path: impl AsRef<Path>) -> Result<Vec<ScoredPair>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<ScoredPair>().enumerate() {
        let p = row.map_err(|e| Error::Parse { record: format!("row {}", i + 1), message: e.to_string() })?;
        for (name, v) in [("relevance", p.relevance), ("engagement", p.engagement), ("combined", p.combined), ("human", p.human)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!("pair {}: {name} score {v} is outside [0, 1]", p.pair_id)));
                }
            }
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_reports_csv(path: impl AsRef<Path>, reports: &[CorrelationReport]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One conversation of the aggregation study: its conversation-level score
/// and the utterance-level scores of its pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationScores {
    pub conversation_id: String,
    pub conversation_score: f64,
    pub utterance_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationRow {
    pub method: AggregateMethod,
    pub pearson: Correlation,
}

/// Correlates each aggregate (min, max, mean) of utterance scores with the
/// conversation-level scores.
pub fn aggregation_study(convs: &[ConversationScores]) -> Result<Vec<AggregationRow>> {
    let target: Vec<f64> = convs.iter().map(|c| c.conversation_score).collect();
    AggregateMethod::ALL
        .into_iter()
        .map(|method| {
            let agg = convs
                .iter()
                .map(|c| aggregate(&c.utterance_scores, method))
                .collect::<Result<Vec<_>>>()?;
            Ok(AggregationRow { method, pearson: pearson(&agg, &target)? })
        })
        .collect()
}

/// Writes a plain-text aggregation table.
pub fn write_aggregation_table(mut out: impl Write, rows: &[AggregationRow]) -> std::io::Result<()> {
    writeln!(out, "aggregation\tpearson\tp_value\tn")?;
    for r in rows {
        writeln!(out, "{}\t{:.4}\t{:.3e}\t{}", r.method.name(), r.pearson.coefficient, r.pearson.p_value, r.pearson.n)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_examples() {
        for m in AggregateMethod::ALL {
            assert_eq!(aggregate(&[2.0], m).unwrap(), 2.0);
        }
        assert_eq!(aggregate(&[1.0, 2.0, 3.0], AggregateMethod::Min).unwrap(), 1.0);
        assert_eq!(aggregate(&[1.0, 2.0, 3.0], AggregateMethod::Max).unwrap(), 3.0);
        assert_eq!(aggregate(&[1.0, 2.0, 3.0], AggregateMethod::Mean).unwrap(), 2.0);
        assert!(aggregate(&[], AggregateMethod::Mean).is_err());
    }

    #[test]
    fn scored_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scored.csv");
        let mut a = ScoredPair::new("p1", Some(0.99), Some(0.88), Some(0.9175)).unwrap();
        a.query = "OK, why?".into();
        a.response = "Because, \"well\"".into();
        let b = ScoredPair::new("p2", Some(0.5), None, None).unwrap();
        write_scored_csv(&path, &[a.clone(), b.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("pair_id,query,response,relevance,engagement,combined,human\n"));
        assert_eq!(read_scored_csv(&path).unwrap(), vec![a, b]);
    }

    #[test]
    fn combine_and_round() {
        assert_eq!(round_half_up(combine(0.99, 0.88).unwrap(), 2), 0.94);
        assert_eq!(round_half_up(combine(0.82, 0.11).unwrap(), 2), 0.47);
        assert_eq!(round_half_up(combine(0.65, 0.94).unwrap(), 2), 0.80);
        assert_eq!(combine(0.3, 0.3).unwrap(), 0.3);
        assert!(combine(1.2, 0.5).is_err());
        assert!(combine(0.5, -0.1).is_err());
        assert_eq!(round_half_up(0.125, 2), 0.13);
        assert_eq!(round_half_up(0.1249, 2), 0.12);
    }

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap().coefficient - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap().coefficient + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &vec![1.0; 10]).is_err());
        assert!(pearson(&x[..2], &y[..2]).is_err());
    }

    #[test]
    fn pearson_p_value_matches_reference() {
        // r = 0.5 at n = 12: t = 0.5 * sqrt(10 / 0.75) = 1.8257, df 10,
        // two-sided p = 0.09788 (t table).
        let p = correlation_p_value(0.5, 12);
        assert!((p - 0.09788).abs() < 5e-5, "{p}");
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 5.0, 2.0, 8.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.powi(3) + 7.0).collect();
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &y).unwrap().coefficient - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &rev).unwrap().coefficient + 1.0).abs() < 1e-15);
        assert_eq!(midranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn classification_metrics() {
        assert_eq!(balanced_accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        let mut labels = vec![0u8; 90];
        labels.extend([1u8; 10]);
        assert_eq!(balanced_accuracy(&labels, &[1u8; 100]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[1, 0], &[0.7, 0.7]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[1, 1, 0, 0], &[0.9, 0.8, 0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1, 1, 0, 0], &[0.5; 4]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[1, 1], &[0.1, 0.2]), Err(Error::SingleClass(_))));
        assert!(balanced_accuracy(&[0, 0], &[0, 1]).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&[1, 2, 3, 1], &[1, 2, 3, 1]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[1, 2], &[2, 1]).unwrap(), -1.0);
        assert!(matches!(cohen_kappa(&[3, 3], &[3, 3]), Err(Error::Undefined(_))));
    }

    #[test]
    fn agreement_over_pairs() {
        let rec = |p: &str, a: &str, r: u8| AnnotationRecord { pair_id: p.into(), annotator_id: a.into(), rating: r };
        let records = vec![
            rec("p1", "a", 1), rec("p2", "a", 3), rec("p3", "a", 5),
            rec("p1", "b", 1), rec("p2", "b", 3), rec("p3", "b", 5),
            rec("p1", "c", 2), rec("p4", "c", 4),
        ];
        let rep = mean_pairwise_agreement(&records).unwrap();
        // Only (a, b) share two or more items.
        assert_eq!(rep.kappa_pairs, 1);
        assert_eq!(rep.mean_pairwise_kappa, 1.0);
        assert!((rep.mean_pairwise_pearson - 1.0).abs() < 1e-12);
        assert_eq!((rep.annotators, rep.items), (3, 4));
    }

    #[test]
    fn dependent_test_symmetry_and_errors() {
        for r_kh in [-0.5, 0.0, 0.3, 0.9] {
            let t = dependent_correlation_test(0.4, 0.4, r_kh, 100).unwrap();
            assert_eq!(t.z, 0.0);
            assert_eq!(t.p_value, 1.0);
        }
        assert!(dependent_correlation_test(1.0, 0.4, 0.2, 100).is_err());
        assert!(dependent_correlation_test(0.5, 0.4, 0.2, 3).is_err());
    }

    #[test]
    fn dependent_test_monotone_in_gap() {
        let mut last = 1.0;
        for gap in [0.02, 0.05, 0.1, 0.2, 0.3] {
            let p = dependent_correlation_test(0.3 + gap, 0.3, 0.5, 200).unwrap().p_value;
            assert!(p < last, "gap {gap}: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn report_on_identical_columns() {
        let scored: Vec<ScoredPair> = (0..5)
            .map(|i| {
                let v = f64::from(i) / 5.0;
                ScoredPair::new(format!("p{i}"), Some(v), Some(v), Some(v)).unwrap()
            })
            .collect();
        let r = build_report(&scored, Metric::Combined).unwrap();
        assert!((r.pearson_r - 1.0).abs() < 1e-12 && (r.spearman_rho - 1.0).abs() < 1e-12);
        assert!(build_report(&scored[..2], Metric::Combined).is_err());
        let mut missing = scored.clone();
        missing[0].human = None;
        assert!(build_report(&missing, Metric::Relevance).is_err());
    }
}
