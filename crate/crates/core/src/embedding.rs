//! Utterance embedding backends, pooling and the on-disk vector cache.
//!
//! Three backends implement [`EmbeddingBackend`]:
//!
//! * [`StaticEmbeddings`]: word vectors loaded from a word2vec file (text or
//!   binary). Out-of-vocabulary tokens map to the zero vector.
//! * [`ContextualEmbeddings`]: transformer token vectors. The transformer runs
//!   outside this crate (`python/export_contextual.py`) and writes the cache
//!   layout below; this backend only reads it.
//! * [`HashedEmbeddings`]: deterministic pseudo-random token vectors derived
//!   from a hash of the token. Needs no model files; used for fixtures and
//!   smoke runs.
//!
//! Cache layout: `<cache_dir>/<backend-id>/<sha256(text)>.vec`, holding
//! `token_count: u32`, `dimension: u32`, then `token_count * dimension`
//! float32 values, all little-endian.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text;

pub const CONTEXTUAL_DIM: usize = 768;
pub const STATIC_DIM: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    /// Empty strings when the sequence was read back from the cache.
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
    pub dim: usize,
}

impl TokenEmbeddingSequence {
    pub fn new(tokens: Vec<String>, vectors: Vec<Vec<f32>>, dim: usize) -> Result<Self> {
        if tokens.len() != vectors.len() {
            return Err(Error::Validation(format!(
                "{} tokens but {} vectors",
                tokens.len(),
                vectors.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
        Ok(Self { tokens, vectors, dim })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::Validation(format!("unknown pooling '{other}'"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceVector {
    pub values: Vec<f32>,
    pub pooling: Pooling,
}

impl UtteranceVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Collapses a token sequence into one vector by elementwise mean or max.
pub fn pool(seq: &TokenEmbeddingSequence, strategy: Pooling) -> Result<UtteranceVector> {
    let first = seq
        .vectors
        .first()
        .ok_or_else(|| Error::Empty("cannot pool an empty token sequence".into()))?;
    let mut acc: Vec<f64> = first.iter().map(|&x| f64::from(x)).collect();
    for v in &seq.vectors[1..] {
        if v.len() != acc.len() {
            return Err(Error::DimensionMismatch { expected: acc.len(), got: v.len() });
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            match strategy {
                Pooling::Mean => *a += f64::from(x),
                Pooling::Max => *a = a.max(f64::from(x)),
            }
        }
    }
    if strategy == Pooling::Mean {
        let n = seq.vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(UtteranceVector { values: acc.into_iter().map(|x| x as f32).collect(), pooling: strategy })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Contextual,
    Static,
    Hashed,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contextual" => Ok(BackendKind::Contextual),
            "static" => Ok(BackendKind::Static),
            "hashed" => Ok(BackendKind::Hashed),
            other => Err(Error::Validation(format!("unknown backend '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBackendSpec {
    pub kind: BackendKind,
    pub dimension: usize,
    /// Model name (contextual), vector file path (static) or free label (hashed).
    pub model_identifier: String,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl EmbeddingBackendSpec {
    pub fn contextual(model: impl Into<String>, cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Contextual,
            dimension: CONTEXTUAL_DIM,
            model_identifier: model.into(),
            cache_dir: Some(cache_dir.into()),
        }
    }

    pub fn static_vectors(path: impl Into<String>) -> Self {
        Self { kind: BackendKind::Static, dimension: STATIC_DIM, model_identifier: path.into(), cache_dir: None }
    }

    pub fn hashed(dimension: usize) -> Self {
        Self { kind: BackendKind::Hashed, dimension, model_identifier: "hashed".into(), cache_dir: None }
    }

    /// Stable identifier used as the cache subdirectory and in checkpoints.
    pub fn backend_id(&self) -> String {
        let model = match self.kind {
            BackendKind::Static => Path::new(&self.model_identifier)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.model_identifier.clone()),
            _ => self.model_identifier.clone(),
        };
        let model: String = model
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        let kind = match self.kind {
            BackendKind::Contextual => "contextual",
            BackendKind::Static => "static",
            BackendKind::Hashed => "hashed",
        };
        format!("{kind}-{model}-{}", self.dimension)
    }
}

/// A read-only token embedder. Implementations must be safe to share
/// across worker threads.
pub trait EmbeddingBackend: Send + Sync {
    fn backend_id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddingSequence>;
}

fn require_text(text: &str) -> Result<&str> {
    let t = text.trim();
    if t.is_empty() {
        Err(Error::Empty("cannot embed empty text".into()))
    } else {
        Ok(t)
    }
}

/// Embeds `text`, rejecting blank input.
pub fn embed(backend: &dyn EmbeddingBackend, text: &str) -> Result<TokenEmbeddingSequence> {
    let text = require_text(text)?;
    backend.embed_tokens(text)
}

pub fn embed_pooled(backend: &dyn EmbeddingBackend, text: &str, pooling: Pooling) -> Result<UtteranceVector> {
    pool(&embed(backend, text)?, pooling)
}

/// Word vectors keyed by surface form.
pub struct StaticEmbeddings {
    id: String,
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl StaticEmbeddings {
    pub fn from_map(id: impl Into<String>, dim: usize, vectors: HashMap<String, Vec<f32>>) -> Result<Self> {
        if let Some(v) = vectors.values().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
        Ok(Self { id: id.into(), dim, vectors })
    }

    /// Loads a word2vec file, detecting the binary format by its header.
    pub fn load(spec: &EmbeddingBackendSpec) -> Result<Self> {
        let path = Path::new(&spec.model_identifier);
        let file = fs::File::open(path).map_err(|e| Error::ModelLoad {
            message: format!("cannot open word vectors {}: {e}", path.display()),
            hint: "pass a word2vec .txt/.bin file (e.g. GoogleNews-vectors-negative300.bin) as the static model".into(),
        })?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let declared = match fields.as_slice() {
            [count, dim] => count.parse::<usize>().ok().zip(dim.parse::<usize>().ok()),
            _ => None,
        };
        let vectors = match declared {
            Some((count, dim)) if is_binary(path)? => read_word2vec_binary(&mut reader, count, dim, path)?,
            Some(_) => read_word2vec_text(&mut reader, None, path)?,
            None => read_word2vec_text(&mut reader, Some(header.as_str()), path)?,
        };
        let found = vectors.values().next().map(Vec::len).unwrap_or(spec.dimension);
        if found != spec.dimension {
            return Err(Error::ModelLoad {
                message: format!("{} holds {found}-d vectors, backend declares {}", path.display(), spec.dimension),
                hint: "set the backend dimension to the file's vector width".into(),
            });
        }
        Self::from_map(spec.backend_id(), spec.dimension, vectors)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vectors.len()
    }

    fn lookup(&self, token: &str) -> Option<&Vec<f32>> {
        self.vectors.get(token).or_else(|| self.vectors.get(&token.to_lowercase()))
    }
}

fn is_binary(path: &Path) -> Result<bool> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|f| f.take(4096).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(std::str::from_utf8(&buf).is_err() || buf.contains(&0))
}

fn read_word2vec_text(
    reader: &mut impl BufRead,
    first: Option<&str>,
    path: &Path,
) -> Result<HashMap<String, Vec<f32>>> {
    let mut out = HashMap::new();
    let mut parse_line = |line: &str, lineno: usize| -> Result<()> {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { return Ok(()) };
        let vec: std::result::Result<Vec<f32>, _> = parts.map(str::parse::<f32>).collect();
        let vec = vec.map_err(|e| Error::Parse {
            record: format!("{}:{lineno}", path.display()),
            message: e.to_string(),
        })?;
        out.insert(word.to_string(), vec);
        Ok(())
    };
    if let Some(line) = first {
        parse_line(line, 1)?;
    }
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        parse_line(&line, i + 2)?;
    }
    Ok(out)
}

fn read_word2vec_binary(
    reader: &mut impl BufRead,
    count: usize,
    dim: usize,
    path: &Path,
) -> Result<HashMap<String, Vec<f32>>> {
    let mut out = HashMap::with_capacity(count);
    let mut raw = vec![0u8; dim * 4];
    for _ in 0..count {
        let mut word = Vec::new();
        reader.read_until(b' ', &mut word).map_err(|e| Error::io(path, e))?;
        if word.is_empty() {
            break;
        }
        word.pop();
        let word = String::from_utf8_lossy(&word).trim().to_string();
        reader.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
        let vec = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.insert(word, vec);
    }
    Ok(out)
}

impl EmbeddingBackend for StaticEmbeddings {
    fn backend_id(&self) -> String {
        self.id.clone()
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        let mut tokens: Vec<String> = text::word_tokens(text).into_iter().map(String::from).collect();
        // Punctuation-only text still yields one (OOV, zero) token.
        if tokens.is_empty() {
            tokens.push(text.trim().to_string());
        }
        let vectors = tokens
            .iter()
            .map(|t| self.lookup(t).cloned().unwrap_or_else(|| vec![0.0; self.dim]))
            .collect();
        TokenEmbeddingSequence::new(tokens, vectors, self.dim)
    }
}

/// Token vectors drawn uniformly from `[-1, 1)` by a generator seeded with
/// the SHA-256 of the lowercased token.
pub struct HashedEmbeddings {
    dim: usize,
    id: String,
}

impl HashedEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self { dim, id: EmbeddingBackendSpec::hashed(dim).backend_id() }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f32> {
        let digest = Sha256::digest(token.to_lowercase().as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }
}

impl EmbeddingBackend for HashedEmbeddings {
    fn backend_id(&self) -> String {
        self.id.clone()
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        let mut tokens: Vec<String> = text::lower_tokens(text);
        if tokens.is_empty() {
            tokens.push(text.trim().to_string());
        }
        let vectors = tokens.iter().map(|t| self.token_vector(t)).collect();
        TokenEmbeddingSequence::new(tokens, vectors, self.dim)
    }
}

/// Final-layer transformer token vectors, served from the cache populated by
/// the exporter script.
pub struct ContextualEmbeddings {
    spec: EmbeddingBackendSpec,
    cache: EmbeddingCache,
}

impl ContextualEmbeddings {
    pub fn open(spec: &EmbeddingBackendSpec) -> Result<Self> {
        let dir = spec.cache_dir.clone().ok_or_else(|| Error::ModelLoad {
            message: "contextual backend needs a cache directory".into(),
            hint: "set ENGAGE_CACHE_DIR or `cache_dir` in the run config".into(),
        })?;
        Ok(Self { spec: spec.clone(), cache: EmbeddingCache::new(dir) })
    }
}

impl EmbeddingBackend for ContextualEmbeddings {
    fn backend_id(&self) -> String {
        self.spec.backend_id()
    }

    fn dimension(&self) -> usize {
        self.spec.dimension
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        let id = self.backend_id();
        match self.cache.get(&id, text)? {
            Some(seq) if seq.dim == self.spec.dimension => Ok(seq),
            Some(seq) => Err(Error::DimensionMismatch { expected: self.spec.dimension, got: seq.dim }),
            None => Err(Error::ModelLoad {
                message: format!("no {} vectors for text {:?}", self.spec.model_identifier, truncate(text, 40)),
                hint: format!(
                    "run `python python/export_contextual.py --model {} --cache-dir {} <pairs.jsonl>` first",
                    self.spec.model_identifier,
                    self.cache.root().display()
                ),
            }),
        }
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    root: PathBuf,
}

impl EmbeddingCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, backend_id: &str, text: &str) -> PathBuf {
        self.root.join(backend_id).join(format!("{}.vec", text_hash(text)))
    }

    pub fn get(&self, backend_id: &str, text: &str) -> Result<Option<TokenEmbeddingSequence>> {
        let path = self.path_for(backend_id, text);
        match fs::read(&path) {
            Ok(bytes) => decode_vec(&bytes, &path).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Writes through a temporary file and renames it into place, so readers
    /// see either nothing or a complete entry.
    pub fn put(&self, backend_id: &str, text: &str, seq: &TokenEmbeddingSequence) -> Result<()> {
        let path = self.path_for(backend_id, text);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            text_hash(text),
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, encode_vec(seq)).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

pub fn encode_vec(seq: &TokenEmbeddingSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + seq.len() * seq.dim * 4);
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim as u32).to_le_bytes());
    for v in &seq.vectors {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_vec(bytes: &[u8], path: &Path) -> Result<TokenEmbeddingSequence> {
    let corrupt = |m: &str| Error::Parse { record: path.display().to_string(), message: m.to_string() };
    if bytes.len() < 8 {
        return Err(corrupt("truncated header"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != count * dim * 4 {
        return Err(corrupt("payload length does not match header"));
    }
    let flat: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let vectors: Vec<Vec<f32>> = if dim == 0 { vec![Vec::new(); count] } else { flat.chunks(dim).map(<[f32]>::to_vec).collect() };
    TokenEmbeddingSequence::new(vec![String::new(); count], vectors, dim)
}

/// Read-through disk cache in front of another backend.
pub struct CachedBackend<B> {
    inner: B,
    cache: EmbeddingCache,
}

impl<B: EmbeddingBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: EmbeddingCache) -> Self {
        Self { inner, cache }
    }
}

impl<B: EmbeddingBackend> EmbeddingBackend for CachedBackend<B> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        let id = self.inner.backend_id();
        if let Some(hit) = self.cache.get(&id, text)? {
            return Ok(hit);
        }
        let seq = self.inner.embed_tokens(text)?;
        self.cache.put(&id, text, &seq)?;
        Ok(seq)
    }
}

/// Instantiates the backend a spec describes. Static and hashed backends are
/// wrapped in the disk cache when the spec names a cache directory.
pub fn load_backend(spec: &EmbeddingBackendSpec) -> Result<Box<dyn EmbeddingBackend>> {
    if spec.dimension == 0 {
        return Err(Error::Validation("embedding dimension must be positive".into()));
    }
    let cache = spec.cache_dir.as_ref().map(EmbeddingCache::new);
    Ok(match (spec.kind, cache) {
        (BackendKind::Contextual, _) => Box::new(ContextualEmbeddings::open(spec)?),
        (BackendKind::Static, Some(c)) => Box::new(CachedBackend::new(StaticEmbeddings::load(spec)?, c)),
        (BackendKind::Static, None) => Box::new(StaticEmbeddings::load(spec)?),
        (BackendKind::Hashed, Some(c)) => Box::new(CachedBackend::new(HashedEmbeddings::new(spec.dimension), c)),
        (BackendKind::Hashed, None) => Box::new(HashedEmbeddings::new(spec.dimension)),
    })
}
