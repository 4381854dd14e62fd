//! Python bindings: backends, the engagement and relevance models, scoring,
//! and the correlation statistics.

#![allow(clippy::too_many_arguments)]

use engage_core::corpus::{self, QueryResponsePair};
use engage_core::embedding::{load_backend, EmbeddingBackend, EmbeddingBackendSpec, Pooling};
use engage_core::engagement::{self, EngagementModel, LeakageGuard};
use engage_core::nn::TrainConfig;
use engage_core::relevance::{self, RelevanceConfig, RelevanceModel, RelevanceVariant};
use engage_core::stats::{self, DependentTest};
use engage_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(engage_eval, EngageError, PyException);
create_exception!(engage_eval, LeakageError, EngageError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Leakage { .. } => LeakageError::new_err(e.to_string()),
        Error::ModelLoad { ref hint, .. } => EngageError::new_err(format!("{e} ({hint})")),
        _ => EngageError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

type PairTuple = (String, String, String, Option<u8>);

fn to_pairs(rows: Vec<PairTuple>) -> Vec<QueryResponsePair> {
    rows.into_iter()
        .map(|(id, q, r, label)| {
            let mut p = QueryResponsePair::new(id, q, r);
            p.label = label;
            p
        })
        .collect()
}

fn pair_dict<'py>(py: Python<'py>, p: &QueryResponsePair) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("pair_id", &p.pair_id)?;
    d.set_item("query", &p.query)?;
    d.set_item("response", &p.response)?;
    d.set_item("raw_score", p.raw_score)?;
    d.set_item("label", p.label)?;
    d.set_item("origin_conversation", &p.origin_conversation)?;
    Ok(d)
}

/// Token-embedding backend.
#[pyclass(module = "engage_eval")]
struct Backend {
    spec: EmbeddingBackendSpec,
    inner: Box<dyn EmbeddingBackend>,
}

impl Backend {
    fn open(spec: EmbeddingBackendSpec) -> PyResult<Self> {
        let inner = load_backend(&spec).map_err(to_py)?;
        let spec = EmbeddingBackendSpec { dimension: inner.dimension(), ..spec };
        Ok(Self { spec, inner })
    }
}

#[pymethods]
impl Backend {
    /// Deterministic feature-hashing vectors; needs no model files.
    #[staticmethod]
    #[pyo3(signature = (dimension=64))]
    fn hashed(dimension: usize) -> PyResult<Self> {
        Self::open(EmbeddingBackendSpec::hashed(dimension))
    }

    /// Word vectors from a text file (`word v1 v2 ...` per line).
    #[staticmethod]
    fn static_vectors(path: &str, dimension: usize) -> PyResult<Self> {
        let mut spec = EmbeddingBackendSpec::static_vectors(path);
        spec.dimension = dimension;
        Self::open(spec)
    }

    /// Contextual token vectors read from a pre-filled cache directory.
    #[staticmethod]
    #[pyo3(signature = (model, cache_dir, dimension=768))]
    fn contextual(model: &str, cache_dir: &str, dimension: usize) -> PyResult<Self> {
        let mut spec = EmbeddingBackendSpec::contextual(model, cache_dir);
        spec.dimension = dimension;
        Self::open(spec)
    }

    #[getter]
    fn id(&self) -> String {
        self.spec.backend_id()
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    /// Pooled utterance vector.
    #[pyo3(signature = (text, pooling="mean"))]
    fn embed(&self, text: &str, pooling: &str) -> PyResult<Vec<f32>> {
        let v = engage_core::embedding::embed_pooled(self.inner.as_ref(), text, parse(pooling)?).map_err(to_py)?;
        Ok(v.values)
    }
}

fn train_config(pooling: Pooling, epochs: usize, learning_rate: Option<f64>, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_pooling(pooling);
    cfg.epochs = epochs;
    cfg.seed = seed;
    if let Some(lr) = learning_rate {
        cfg.learning_rate = lr;
    }
    cfg
}

#[pyclass(name = "EngagementModel", module = "engage_eval")]
struct PyEngagementModel {
    model: EngagementModel,
}

#[pymethods]
impl PyEngagementModel {
    /// Trains on `(pair_id, query, response, label)` tuples.
    #[staticmethod]
    #[pyo3(signature = (backend, train, valid=Vec::new(), pooling="mean", epochs=50, learning_rate=None, seed=0))]
    fn train(
        py: Python<'_>,
        backend: &Backend,
        train: Vec<PairTuple>,
        valid: Vec<PairTuple>,
        pooling: &str,
        epochs: usize,
        learning_rate: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let pooling: Pooling = parse(pooling)?;
        let cfg = train_config(pooling, epochs, learning_rate, seed);
        let (train, valid) = (to_pairs(train), to_pairs(valid));
        let (model, _) = py
            .detach(|| engagement::train(&train, &valid, &cfg, backend.inner.as_ref(), &backend.spec, pooling))
            .map_err(to_py)?;
        Ok(Self { model })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { model: EngagementModel::load(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.model.save(path).map_err(to_py)
    }

    /// Fine-tunes every layer on a small set; pairs in `holdout` may not appear in it.
    #[pyo3(signature = (backend, train, valid=Vec::new(), holdout=Vec::new(), epochs=50, learning_rate=None, seed=0))]
    fn finetune(
        &self,
        py: Python<'_>,
        backend: &Backend,
        train: Vec<PairTuple>,
        valid: Vec<PairTuple>,
        holdout: Vec<PairTuple>,
        epochs: usize,
        learning_rate: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = train_config(self.model.pooling, epochs, learning_rate, seed);
        let mut guard = LeakageGuard::new();
        guard.register(&to_pairs(holdout));
        let (train, valid) = (to_pairs(train), to_pairs(valid));
        let (model, _) = py
            .detach(|| engagement::finetune(&self.model, &train, &valid, &cfg, backend.inner.as_ref(), &guard))
            .map_err(to_py)?;
        Ok(Self { model })
    }

    /// Probability that the response is engaging.
    fn predict(&self, backend: &Backend, query: &str, response: &str) -> PyResult<f64> {
        engagement::predict_engagement(&self.model, backend.inner.as_ref(), query, response).map_err(to_py)
    }

    #[getter]
    fn pooling(&self) -> String {
        self.model.pooling.to_string()
    }

    #[getter]
    fn backend_id(&self) -> String {
        self.model.backend.backend_id()
    }
}

#[pyclass(name = "RelevanceModel", module = "engage_eval")]
struct PyRelevanceModel {
    model: RelevanceModel,
}

#[pymethods]
impl PyRelevanceModel {
    /// Trains on positive pairs with seeded random negatives.
    #[staticmethod]
    #[pyo3(signature = (backend, train, valid=Vec::new(), variant="ranking", pooling="mean", epochs=50, learning_rate=None, seed=0))]
    fn train(
        py: Python<'_>,
        backend: &Backend,
        train: Vec<PairTuple>,
        valid: Vec<PairTuple>,
        variant: &str,
        pooling: &str,
        epochs: usize,
        learning_rate: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let variant: RelevanceVariant = parse(variant)?;
        let pooling: Pooling = parse(pooling)?;
        let mut cfg = RelevanceConfig::new(pooling, seed);
        cfg.train = train_config(pooling, epochs, learning_rate, seed);
        let (train, valid) = (to_pairs(train), to_pairs(valid));
        let (model, _) = py
            .detach(|| {
                relevance::train_relevance(&train, &valid, variant, &cfg, backend.inner.as_ref(), &backend.spec, pooling)
            })
            .map_err(to_py)?;
        Ok(Self { model })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { model: RelevanceModel::load(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.model.save(path).map_err(to_py)
    }

    fn predict(&self, backend: &Backend, query: &str, response: &str) -> PyResult<f64> {
        relevance::predict_relevance(&self.model, backend.inner.as_ref(), query, response).map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.model.variant.name()
    }
}

/// Scores one pair: relevance, engagement and their combination.
#[pyfunction]
fn score(
    py: Python<'_>,
    backend: &Backend,
    relevance_model: &PyRelevanceModel,
    engagement_model: &PyEngagementModel,
    query: &str,
    response: &str,
) -> PyResult<Py<PyDict>> {
    let r = relevance::predict_relevance(&relevance_model.model, backend.inner.as_ref(), query, response).map_err(to_py)?;
    let e = engagement::predict_engagement(&engagement_model.model, backend.inner.as_ref(), query, response)
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("relevance", r)?;
    d.set_item("engagement", e)?;
    d.set_item("combined", stats::combine(r, e).map_err(to_py)?)?;
    Ok(d.unbind())
}

#[pyfunction]
fn combine(relevance: f64, engagement: f64) -> PyResult<f64> {
    stats::combine(relevance, engagement).map_err(to_py)
}

/// 1 when a 0-5 engagement score exceeds the threshold, else 0.
#[pyfunction]
fn binarize(raw_score: f64) -> PyResult<u8> {
    corpus::binarize(raw_score).map_err(to_py)
}

/// Labeled query/response pairs from a ConvAI-style JSON file.
#[pyfunction]
fn read_convai(py: Python<'_>, path: &str) -> PyResult<Vec<Py<PyDict>>> {
    let convs = corpus::parse_convai(path).map_err(to_py)?;
    let mut pairs = corpus::propagate_scores(&convs).pairs;
    corpus::label_pairs(&mut pairs).map_err(to_py)?;
    pairs.iter().map(|p| pair_dict(py, p).map(Bound::unbind)).collect()
}

#[pyfunction]
fn read_pairs(py: Python<'_>, path: &str) -> PyResult<Vec<Py<PyDict>>> {
    let pairs = corpus::read_pairs_jsonl(path).map_err(to_py)?;
    pairs.iter().map(|p| pair_dict(py, p).map(Bound::unbind)).collect()
}

/// `(r, p)`.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let c = stats::pearson(&x, &y).map_err(to_py)?;
    Ok((c.coefficient, c.p_value))
}

/// `(rho, p)`.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let c = stats::spearman(&x, &y).map_err(to_py)?;
    Ok((c.coefficient, c.p_value))
}

#[pyfunction]
fn roc_auc(labels: Vec<u8>, scores: Vec<f64>) -> PyResult<f64> {
    stats::roc_auc(&labels, &scores).map_err(to_py)
}

#[pyfunction]
fn balanced_accuracy(labels: Vec<u8>, predictions: Vec<u8>) -> PyResult<f64> {
    stats::balanced_accuracy(&labels, &predictions).map_err(to_py)
}

#[pyfunction]
fn cohen_kappa(a: Vec<i64>, b: Vec<i64>) -> PyResult<f64> {
    stats::cohen_kappa(&a, &b).map_err(to_py)
}

/// Tests whether `r_jk` and `r_jh` (sharing variable j) differ; returns `(z, p)`.
#[pyfunction]
#[pyo3(signature = (r_jk, r_jh, r_kh, n, method="hittner"))]
fn dependent_correlation_test(r_jk: f64, r_jh: f64, r_kh: f64, n: usize, method: &str) -> PyResult<(f64, f64)> {
    let method: DependentTest = parse(method)?;
    let t = stats::dependent_correlation_test_with(r_jk, r_jh, r_kh, n, method).map_err(to_py)?;
    Ok((t.z, t.p_value))
}

#[pymodule]
fn engage_eval(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EngageError", m.py().get_type::<EngageError>())?;
    m.add("LeakageError", m.py().get_type::<LeakageError>())?;
    m.add_class::<Backend>()?;
    m.add_class::<PyEngagementModel>()?;
    m.add_class::<PyRelevanceModel>()?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(read_convai, m)?)?;
    m.add_function(wrap_pyfunction!(read_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(cohen_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(dependent_correlation_test, m)?)?;
    Ok(())
}
