//! Run configuration and the per-output manifest.

use std::fs;
use std::path::{Path, PathBuf};

use engage_core::embedding::{BackendKind, EmbeddingBackendSpec, Pooling, CONTEXTUAL_DIM, STATIC_DIM};
use engage_core::nn::TrainConfig;
use engage_core::relevance::{NegativeSamplingSpec, RelevanceConfig, RelevanceVariant};
use engage_core::stats::DependentTest;
use engage_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_HASHED_DIM: usize = 64;

/// Every knob a command may read. Loaded from `--config`, then overridden by
/// the environment and command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scoring worker threads; 0 lets the pool decide.
    pub jobs: usize,
    pub backend: BackendKind,
    pub pooling: Pooling,
    /// Transformer name for the contextual backend.
    pub model: String,
    /// Word-vector file for the static backend.
    pub vectors: Option<PathBuf>,
    /// Embedding width; defaults per backend (768 / 300 / 64).
    pub dimension: Option<usize>,
    pub cache_dir: Option<PathBuf>,

    pub epochs: usize,
    /// `None` picks the pooling-specific default.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub patience: usize,

    pub relevance_variant: RelevanceVariant,
    pub negative_ratio: usize,
    pub margin: f64,

    pub svm_c: f64,
    pub birnn_hidden: usize,
    pub birnn_head_hidden: usize,
    pub birnn_dropout: f64,
    pub birnn_learning_rate: f64,

    pub split: [f64; 3],
    pub dependent_test: DependentTest,
}

impl Default for RunConfig {
    fn default() -> Self {
        let birnn = engage_core::baselines::birnn::BiRnnConfig::default();
        Self {
            seed: 0,
            jobs: 0,
            backend: BackendKind::Contextual,
            pooling: Pooling::Mean,
            model: "bert-base-uncased".into(),
            vectors: None,
            dimension: None,
            cache_dir: None,
            epochs: 50,
            learning_rate: None,
            batch_size: TrainConfig::DEFAULT_BATCH,
            patience: TrainConfig::DEFAULT_PATIENCE,
            relevance_variant: RelevanceVariant::Ranking,
            negative_ratio: 1,
            margin: engage_core::relevance::DEFAULT_MARGIN,
            svm_c: engage_core::baselines::svm::DEFAULT_C,
            birnn_hidden: birnn.hidden,
            birnn_head_hidden: birnn.head_hidden,
            birnn_dropout: birnn.dropout,
            birnn_learning_rate: birnn.train.learning_rate,
            split: [0.6, 0.2, 0.2],
            dependent_test: DependentTest::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { record: path.display().to_string(), message: e.to_string() })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(TrainConfig::for_pooling(self.pooling).learning_rate),
            epochs: self.epochs,
            batch_size: self.batch_size,
            class_weights: None,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn relevance_config(&self) -> RelevanceConfig {
        RelevanceConfig {
            train: self.train_config(),
            negatives: NegativeSamplingSpec { ratio: self.negative_ratio, seed: self.seed },
            margin: self.margin,
        }
    }

    pub fn backend_spec(&self) -> Result<EmbeddingBackendSpec> {
        let spec = match self.backend {
            BackendKind::Contextual => {
                let cache = self.cache_dir.clone().ok_or_else(|| Error::ModelLoad {
                    message: "the contextual backend reads token vectors from a cache directory".into(),
                    hint: "set ENGAGE_CACHE_DIR (fill it with python/export_contextual.py)".into(),
                })?;
                let mut s = EmbeddingBackendSpec::contextual(&self.model, cache);
                s.dimension = self.dimension.unwrap_or(CONTEXTUAL_DIM);
                s
            }
            BackendKind::Static => {
                let path = self.vectors.as_ref().ok_or_else(|| Error::ModelLoad {
                    message: "the static backend needs a word-vector file".into(),
                    hint: "set `vectors` in the run config".into(),
                })?;
                let mut s = EmbeddingBackendSpec::static_vectors(path.display().to_string());
                s.dimension = self.dimension.unwrap_or(STATIC_DIM);
                s.cache_dir = self.cache_dir.clone();
                s
            }
            BackendKind::Hashed => {
                let mut s = EmbeddingBackendSpec::hashed(self.dimension.unwrap_or(DEFAULT_HASHED_DIM));
                s.cache_dir = self.cache_dir.clone();
                s
            }
        };
        if spec.dimension == 0 {
            return Err(Error::Validation("embedding dimension must be positive".into()));
        }
        Ok(spec)
    }

    /// Points a checkpoint's backend at this run's cache directory, if any.
    pub fn relocate(&self, mut spec: EmbeddingBackendSpec) -> EmbeddingBackendSpec {
        if self.cache_dir.is_some() {
            spec.cache_dir = self.cache_dir.clone();
        }
        spec
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::NotFound(path.to_path_buf())
    } else {
        Error::Io { path: path.to_path_buf(), source: e }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

/// Writes `<out>.config.json` (resolved configuration) and
/// `<out>.manifest.json` (input hashes) next to the primary output.
pub fn write_run_record(out: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    let config_path = sidecar(out, ".config.json");
    let manifest_path = sidecar(out, ".manifest.json");
    let inputs = inputs
        .iter()
        .map(|p| Ok(InputHash { path: p.display().to_string(), sha256: sha256_file(p)? }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let write = |path: &Path, text: String| fs::write(path, text + "\n").map_err(|e| io_error(path, e));
    write(&config_path, serde_json::to_string_pretty(cfg)?)?;
    write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
}
