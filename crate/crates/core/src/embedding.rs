//! Text embedding providers, the normalizing and caching [`Embedder`], and cosine.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{fnv1a64, sha256, SplitMix64};
use crate::http::HttpClient;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("embedding provider contract violation: {0}")]
    Contract(String),
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("vector cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    /// Lowercase hex SHA-256 of the embedded text.
    pub source_hash: String,
}

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// Dot product accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Cosine of two unit vectors, i.e. their dot product.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.values.len() != b.values.len() {
        return Err(EmbedError::InvalidArgument(format!(
            "dimension mismatch: {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    Ok(dot(&a.values, &b.values))
}

/// Scales to unit L2 norm, computing the norm in f64.
pub fn normalize(values: &[f32]) -> Option<Vec<f32>> {
    let norm = values.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    Some(values.iter().map(|v| (f64::from(*v) / norm) as f32).collect())
}

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identity; vectors from different ids never mix in one cache.
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

pub const MOCK_DIMENSION: usize = 256;

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "in", "is", "it", "of",
    "on", "or", "the", "to", "was", "were", "with",
];

/// Lowercased alphanumeric runs minus stopwords; the whole lowercased text when
/// nothing remains.
pub fn mock_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let tokens: Vec<String> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        .map(str::to_string)
        .collect();
    if tokens.is_empty() {
        vec![lower]
    } else {
        tokens
    }
}

/// Token-hash bag embedder.
///
/// Each token seeds SplitMix64 with its FNV-1a 64 hash and draws `dimension`
/// values `2u - 1` from successive `next_f64` outputs; the token vector is scaled
/// to unit length. Token vectors (repeats included) are summed in f64, the sum is
/// normalized and stored as f32.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dimension: usize,
    id: String,
}

impl MockEmbedder {
    pub fn new() -> Self {
        Self::with_dimension(MOCK_DIMENSION)
    }

    pub fn with_dimension(dimension: usize) -> Self {
        Self {
            dimension,
            id: format!("mock-token-hash-{dimension}"),
        }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut sum = vec![0.0f64; self.dimension];
        for token in mock_tokens(text) {
            let mut g = SplitMix64::new(fnv1a64(token.as_bytes()));
            let v: Vec<f64> = (0..self.dimension).map(|_| 2.0 * g.next_f64() - 1.0).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (s, x) in sum.iter_mut().zip(&v) {
                *s += x / norm;
            }
        }
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        sum.iter().map(|x| (x / norm) as f32).collect()
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Client for the embedding scoring-service contract:
/// `POST {url}` with `{"texts": [..]}` answering `{"dimension": d, "embeddings": [[..], ..]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    url: String,
    dimension: usize,
    token: Option<String>,
    http: HttpClient,
}

#[derive(Deserialize)]
struct EmbeddingsBody {
    dimension: usize,
    embeddings: Vec<Vec<f32>>,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, dimension: usize, token: Option<String>) -> Self {
        Self {
            url: url.into(),
            dimension,
            token,
            http: HttpClient::new(Duration::from_secs(120)),
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.url
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let resp = self
            .http
            .post_json(&self.url, &serde_json::json!({ "texts": texts }), self.token.as_deref())
            .map_err(EmbedError::Transport)?;
        if !resp.is_success() {
            return Err(EmbedError::Transport(format!("HTTP {}: {}", resp.status, resp.body)));
        }
        let body: EmbeddingsBody =
            serde_json::from_str(&resp.body).map_err(|e| EmbedError::Contract(e.to_string()))?;
        if body.dimension != self.dimension {
            return Err(EmbedError::Contract(format!(
                "service declares dimension {}, expected {}",
                body.dimension, self.dimension
            )));
        }
        Ok(body.embeddings)
    }
}

const PROVIDER_BATCH: usize = 64;

/// Embeds texts through a provider, normalizing every vector and caching by
/// content hash so repeated texts never reach the provider twice.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: RwLock<HashMap<[u8; 32], Vec<f32>>>,
    provider_calls: AtomicUsize,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("provider", &self.provider.id())
            .field("dimension", &self.provider.dimension())
            .finish()
    }
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            cache: RwLock::new(HashMap::new()),
            provider_calls: AtomicUsize::new(0),
        }
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn dimension(&self) -> usize {
        self.provider.dimension()
    }

    /// Number of texts sent to the provider so far.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    pub fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(EmbedError::InvalidArgument(format!("text {i} is empty")));
        }
        let hashes: Vec<[u8; 32]> = texts.iter().map(|t| sha256(t.as_bytes())).collect();
        let mut missing: Vec<(usize, [u8; 32])> = Vec::new();
        {
            let cache = self.cache.read().unwrap_or_else(|e| e.into_inner());
            for (i, h) in hashes.iter().enumerate() {
                if !cache.contains_key(h) && !missing.iter().any(|(_, m)| m == h) {
                    missing.push((i, *h));
                }
            }
        }
        let dim = self.provider.dimension();
        for chunk in missing.chunks(PROVIDER_BATCH) {
            let batch: Vec<&str> = chunk.iter().map(|(i, _)| texts[*i]).collect();
            self.provider_calls.fetch_add(batch.len(), Ordering::SeqCst);
            let vectors = self.provider.embed_batch(&batch)?;
            if vectors.len() != batch.len() {
                return Err(EmbedError::Contract(format!(
                    "{} vectors for {} texts",
                    vectors.len(),
                    batch.len()
                )));
            }
            let mut cache = self.cache.write().unwrap_or_else(|e| e.into_inner());
            for ((_, h), v) in chunk.iter().zip(vectors) {
                if v.len() != dim {
                    return Err(EmbedError::Contract(format!(
                        "vector of dimension {} from a provider declaring {dim}",
                        v.len()
                    )));
                }
                let unit = normalize(&v)
                    .ok_or_else(|| EmbedError::Contract("zero or non-finite vector".into()))?;
                cache.insert(*h, unit);
            }
        }
        let cache = self.cache.read().unwrap_or_else(|e| e.into_inner());
        Ok(hashes
            .iter()
            .map(|h| EmbeddingVector {
                values: cache[h].clone(),
                source_hash: hex::encode(h),
            })
            .collect())
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed(&[text])?.remove(0))
    }

    pub fn save_cache(&self, path: &Path) -> Result<(), EmbedError> {
        let cache = self.cache.read().unwrap_or_else(|e| e.into_inner());
        let mut records: Vec<(&[u8; 32], &Vec<f32>)> = cache.iter().collect();
        records.sort_by_key(|(h, _)| **h);
        write_vector_cache(path, self.provider.id(), self.provider.dimension(), &records)
    }

    /// Merges a cache file written for the same provider id and dimension.
    pub fn load_cache(&self, path: &Path) -> Result<usize, EmbedError> {
        let (id, dim, records) = read_vector_cache(path)?;
        let err = |message: String| EmbedError::Cache {
            path: path.display().to_string(),
            message,
        };
        if id != self.provider.id() {
            return Err(err(format!("written by provider {id:?}, not {:?}", self.provider.id())));
        }
        if dim != self.provider.dimension() {
            return Err(err(format!("dimension {dim}, expected {}", self.provider.dimension())));
        }
        let n = records.len();
        self.cache
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .extend(records);
        Ok(n)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"TMVC";
const CACHE_VERSION: u8 = 1;

/// Writes the vector cache layout: magic `TMVC`, version byte, dimension (u32 LE),
/// provider-id length (u16 LE) and UTF-8 bytes, record count (u64 LE), then per
/// record the 32-byte SHA-256 of the text followed by `dimension` f32 LE values.
pub fn write_vector_cache(
    path: &Path,
    provider_id: &str,
    dimension: usize,
    records: &[(&[u8; 32], &Vec<f32>)],
) -> Result<(), EmbedError> {
    let err = |e: std::io::Error| EmbedError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut buf = Vec::with_capacity(32 + records.len() * (32 + 4 * dimension));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.push(CACHE_VERSION);
    buf.extend_from_slice(&(dimension as u32).to_le_bytes());
    buf.extend_from_slice(&(provider_id.len() as u16).to_le_bytes());
    buf.extend_from_slice(provider_id.as_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (hash, values) in records {
        buf.extend_from_slice(*hash);
        for v in values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(err)?;
    f.write_all(&buf).map_err(err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(err)
}

pub type CacheRecords = Vec<([u8; 32], Vec<f32>)>;

pub fn read_vector_cache(path: &Path) -> Result<(String, usize, CacheRecords), EmbedError> {
    let err = |message: String| EmbedError::Cache {
        path: path.display().to_string(),
        message,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| err(e.to_string()))?;
    let mut r = ByteReader { bytes: &bytes, pos: 0 };
    let truncated = || err("truncated file".into());
    if r.take(4).ok_or_else(truncated)? != CACHE_MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = r.take(1).ok_or_else(truncated)?[0];
    if version != CACHE_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let dim = r.u32().ok_or_else(truncated)? as usize;
    let id_len = r.u16().ok_or_else(truncated)? as usize;
    let id = String::from_utf8(r.take(id_len).ok_or_else(truncated)?.to_vec())
        .map_err(|_| err("provider id is not UTF-8".into()))?;
    let count = r.u64().ok_or_else(truncated)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut hash = [0u8; 32];
        hash.copy_from_slice(r.take(32).ok_or_else(truncated)?);
        let values = (0..dim)
            .map(|_| r.f32().ok_or_else(truncated))
            .collect::<Result<Vec<f32>, _>>()?;
        records.push((hash, values));
    }
    if r.pos != bytes.len() {
        return Err(err("trailing bytes".into()));
    }
    Ok((id, dim, records))
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub fn u16(&mut self) -> Option<u16> {
        Some(u16::from_le_bytes(self.take(2)?.try_into().ok()?))
    }

    pub fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    pub fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    pub fn f32(&mut self) -> Option<f32> {
        Some(f32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_and_fallback() {
        assert_eq!(mock_tokens("The EGFR-mutant NSCLC"), vec!["egfr", "mutant", "nsclc"]);
        assert_eq!(mock_tokens("of the"), vec!["of the"]);
    }

    #[test]
    fn mock_is_unit_and_cached() {
        let e = Embedder::new(Arc::new(MockEmbedder::new()));
        let v = e.embed(&["lung cancer", "lung cancer"]).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(e.provider_calls(), 1);
        let n = dot(&v[0].values, &v[0].values).sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        assert!(e.embed(&[""]).is_err());
    }

    #[test]
    fn cosine_rejects_mismatch() {
        let a = EmbeddingVector { values: vec![1.0, 0.0], source_hash: String::new() };
        let b = EmbeddingVector { values: vec![1.0], source_hash: String::new() };
        assert!(cosine(&a, &b).is_err());
    }
}
