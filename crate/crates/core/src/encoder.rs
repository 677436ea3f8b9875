//! Text to fixed-dimension unit vectors.
//!
//! [`Encoder`] wraps an [`Embedder`] with a content-addressed cache, the
//! configured-dimension check and L2 normalization. [`HashingEmbedder`] is an
//! offline embedder: each token maps to a seeded pseudo-random unit vector
//! and a text is the normalized sum of its token vectors, so texts that share
//! tokens point in similar directions.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{api_key_from_env, call_with_retry, BackendError, JsonClient, RemoteSettings, RetryPolicy};
use crate::cache::{decode_vector, encode_vector, BlobStore, CacheStats, Digest32};
use crate::datamodel::{Embedding, Horizon, ItemCatalog};
use crate::error::{Result, TupError};
use crate::profiler::ProfileText;

pub const EMBED_KEY_ENV: &str = "TUP_EMBED_API_KEY";
pub const DEFAULT_DIM: usize = 384;

pub trait Embedder: Send + Sync {
    fn backend_id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> std::result::Result<Vec<f32>, BackendError>;
    fn calls(&self) -> usize;
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "have", "in", "is", "it", "its", "of", "on",
    "or", "that", "the", "this", "to", "was", "were", "with",
];

/// Lowercased alphanumeric runs, stopwords removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let digest = Digest32::of_parts(&[&seed.to_le_bytes(), token.as_bytes()]);
    let mut rng = ChaCha8Rng::from_seed(digest.0);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn normalize(v: &[f64]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return None;
    }
    Some(v.iter().map(|x| (x / norm) as f32).collect())
}

fn hashing_vector(text: &str, dim: usize, seed: u64) -> std::result::Result<Vec<f32>, String> {
    if dim < 2 {
        return Err(format!("hashing dimension must be at least 2, got {dim}"));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(format!("text `{text}` has no tokens"));
    }
    let mut sum = vec![0.0f64; dim];
    for tok in &tokens {
        for (s, t) in sum.iter_mut().zip(token_vector(tok, dim, seed)) {
            *s += t;
        }
    }
    normalize(&sum).ok_or_else(|| format!("tokens of `{text}` cancel to a zero vector"))
}

pub fn hashing_embed(text: &str, dim: usize, seed: u64) -> Result<Embedding> {
    Embedding::new(hashing_vector(text, dim, seed).map_err(TupError::InvalidInput)?)
}

#[derive(Debug)]
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
    model_id: String,
    calls: AtomicUsize,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashingEmbedder {
            dim,
            seed,
            model_id: format!("hashing-d{dim}-s{seed}"),
            calls: AtomicUsize::new(0),
        }
    }
}

impl Embedder for HashingEmbedder {
    fn backend_id(&self) -> &str {
        "hashing"
    }
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed(&self, text: &str) -> std::result::Result<Vec<f32>, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        hashing_vector(text, self.dim, self.seed).map_err(BackendError::Fatal)
    }
    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEmbedSettings {
    #[serde(flatten)]
    pub remote: RemoteSettings,
    pub dim: usize,
}

impl Default for RemoteEmbedSettings {
    fn default() -> Self {
        RemoteEmbedSettings {
            remote: RemoteSettings {
                model: "all-MiniLM-L6-v2".into(),
                ..RemoteSettings::default()
            },
            dim: DEFAULT_DIM,
        }
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug)]
pub struct RemoteEmbedder {
    settings: RemoteEmbedSettings,
    client: JsonClient,
    calls: AtomicUsize,
}

impl RemoteEmbedder {
    pub fn new(settings: RemoteEmbedSettings, api_key: String) -> Self {
        let client = JsonClient::new(api_key, Duration::from_secs(settings.remote.timeout_secs));
        RemoteEmbedder {
            settings,
            client,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_env(settings: RemoteEmbedSettings) -> Result<Self> {
        Ok(Self::new(settings, api_key_from_env(EMBED_KEY_ENV)?))
    }
}

impl Embedder for RemoteEmbedder {
    fn backend_id(&self) -> &str {
        "remote-embed"
    }
    fn model_id(&self) -> &str {
        &self.settings.remote.model
    }
    fn dim(&self) -> usize {
        self.settings.dim
    }
    fn embed(&self, text: &str) -> std::result::Result<Vec<f32>, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let url = format!("{}/embeddings", self.settings.remote.base_url.trim_end_matches('/'));
        let resp = self.client.post(&url, &json!({"model": self.settings.remote.model, "input": text}))?;
        let values = resp["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| BackendError::Fatal("response has no data[0].embedding".into()))?;
        values
            .iter()
            .map(|v| v.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| BackendError::Fatal("embedding contains a non-number".into()))
    }
    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Rows keyed by string, all of one dimension. Iteration is in key order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: BTreeMap<String, Embedding>,
}

const TABLE_MAGIC: &str = "tup-embeddings";
const TABLE_VERSION: u32 = 1;

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, embedding: Embedding) -> Result<()> {
        let key = key.into();
        if embedding.dim() != self.dim {
            return Err(TupError::DimMismatch {
                expected: self.dim,
                got: embedding.dim(),
            });
        }
        if key.is_empty() || key.contains('\n') {
            return Err(TupError::invalid(format!("invalid table key {key:?}")));
        }
        if self.rows.contains_key(&key) {
            return Err(TupError::invalid(format!("duplicate table key `{key}`")));
        }
        self.rows.insert(key, embedding);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Embedding> {
        self.rows.get(key)
    }

    pub fn require(&self, key: &str) -> Result<&Embedding> {
        self.get(key)
            .ok_or_else(|| TupError::invalid(format!("no embedding for `{key}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Header lines (format version, dim, row count), then per row a key
    /// line followed by `dim` little-endian f32.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TABLE_MAGIC} {TABLE_VERSION}")?;
        writeln!(w, "dim {}", self.dim)?;
        writeln!(w, "rows {}", self.rows.len())?;
        for (key, emb) in &self.rows {
            writeln!(w, "{key}")?;
            for v in emb.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        fn line<R: BufRead>(r: &mut R) -> Result<String> {
            let mut s = String::new();
            let n = r.read_line(&mut s).map_err(|e| TupError::Format(e.to_string()))?;
            if n == 0 || !s.ends_with('\n') {
                return Err(TupError::Format("embedding table truncated".into()));
            }
            s.pop();
            Ok(s)
        }
        fn header_value(s: &str, name: &str) -> Result<usize> {
            s.strip_prefix(name)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| TupError::Format(format!("expected `{name} <n>`, got `{s}`")))
        }

        let magic = line(&mut r)?;
        if magic != format!("{TABLE_MAGIC} {TABLE_VERSION}") {
            return Err(TupError::Format(format!("unsupported embedding table header `{magic}`")));
        }
        let dim = header_value(&line(&mut r)?, "dim")?;
        let rows = header_value(&line(&mut r)?, "rows")?;
        let mut table = EmbeddingTable::new(dim);
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..rows {
            let key = line(&mut r)?;
            r.read_exact(&mut buf).map_err(|e| TupError::Format(format!("row `{key}`: {e}")))?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            table.insert(key, Embedding::new(values)?)?;
        }
        Ok(table)
    }
}

pub fn profile_key(user_id: &str, horizon: Horizon) -> String {
    format!("{user_id}#{horizon}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub retry: RetryPolicy,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: DEFAULT_DIM,
            retry: RetryPolicy::default(),
        }
    }
}

pub struct Encoder<'a> {
    backend: &'a dyn Embedder,
    cache: BlobStore,
    config: EncoderConfig,
}

impl<'a> Encoder<'a> {
    pub fn new(backend: &'a dyn Embedder, cache_dir: Option<PathBuf>, config: EncoderConfig) -> Result<Self> {
        if backend.dim() != config.dim {
            return Err(TupError::DimMismatch {
                expected: config.dim,
                got: backend.dim(),
            });
        }
        let cache = match cache_dir {
            Some(dir) => BlobStore::on_disk(dir, "bin")?,
            None => BlobStore::in_memory("bin"),
        };
        Ok(Encoder { backend, cache, config })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    /// Unit-length embedding of `text`, served from the cache when possible.
    pub fn embed_text(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(TupError::invalid("cannot embed empty text"));
        }
        let digest = Digest32::of_parts(&[
            self.backend.backend_id().as_bytes(),
            self.backend.model_id().as_bytes(),
            text.as_bytes(),
        ]);
        if let Some(bytes) = self.cache.get(&digest)? {
            let values = decode_vector(&bytes)?;
            self.check_dim(values.len())?;
            return Embedding::new(values);
        }
        let raw = call_with_retry(self.backend.backend_id(), &self.config.retry, || self.backend.embed(text))?;
        self.check_dim(raw.len())?;
        let wide: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let unit = normalize(&wide).ok_or_else(|| TupError::NonFinite(format!("embedding of `{text}`")))?;
        self.cache.put(&digest, &encode_vector(&unit))?;
        Embedding::new(unit)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.config.dim {
            return Err(TupError::DimMismatch {
                expected: self.config.dim,
                got,
            });
        }
        Ok(())
    }

    /// One row per item, embedded from title plus description.
    pub fn encode_items(&self, catalog: &ItemCatalog) -> Result<EmbeddingTable> {
        if catalog.is_empty() {
            return Err(TupError::invalid("catalog is empty"));
        }
        let mut table = EmbeddingTable::new(self.dim());
        for record in catalog.iter() {
            let emb = self
                .embed_text(&record.text())
                .map_err(|e| TupError::invalid(format!("item `{}`: {e}", record.item_id)))?;
            table.insert(record.item_id.clone(), emb)?;
        }
        Ok(table)
    }

    /// Rows keyed `user#horizon`. Every user that appears must have a profile
    /// for each horizon in `required`.
    pub fn encode_profiles(&self, profiles: &[ProfileText], required: &[Horizon]) -> Result<EmbeddingTable> {
        let mut have: BTreeMap<&str, Vec<Horizon>> = BTreeMap::new();
        for p in profiles {
            have.entry(&p.user_id).or_default().push(p.horizon);
        }
        let incomplete: Vec<String> = have
            .iter()
            .filter_map(|(user, hs)| {
                let missing: Vec<&str> = required.iter().filter(|h| !hs.contains(h)).map(|h| h.as_str()).collect();
                (!missing.is_empty()).then(|| format!("{user} (missing {})", missing.join(", ")))
            })
            .collect();
        if !incomplete.is_empty() {
            return Err(TupError::invalid(format!("incomplete profiles: {}", incomplete.join("; "))));
        }
        let mut table = EmbeddingTable::new(self.dim());
        for p in profiles {
            let emb = self
                .embed_text(&p.text)
                .map_err(|e| TupError::invalid(format!("profile {}#{}: {e}", p.user_id, p.horizon)))?;
            table.insert(profile_key(&p.user_id, p.horizon), emb)?;
        }
        Ok(table)
    }
}
