//! Chat-completion providers: the HTTP client and the response cache wrapper.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{LlmError, LlmProvider, LlmRequest, LlmResponse, TokenUsage};
use crate::http::HttpClient;

/// Client for an OpenAI-style `POST {base}/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct OpenAiChatProvider {
    base_url: String,
    token: Option<String>,
    http: HttpClient,
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl OpenAiChatProvider {
    pub fn new(base_url: impl Into<String>, token: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            token,
            http: HttpClient::new(Duration::from_secs(300)),
        }
    }

    /// Reads the bearer token from the named environment variable, if set.
    pub fn with_token_env(base_url: impl Into<String>, var: &str) -> Self {
        Self::new(base_url, std::env::var(var).ok().filter(|t| !t.is_empty()))
    }
}

impl LlmProvider for OpenAiChatProvider {
    fn name(&self) -> &str {
        "openai-chat"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        });
        if let Some(seed) = request.decoding.seed {
            body["seed"] = json!(seed);
        }
        let started = Instant::now();
        let url = format!("{}/chat/completions", self.base_url);
        let resp = self
            .http
            .post_json(&url, &body, self.token.as_deref())
            .map_err(LlmError::Transport)?;
        if !resp.is_success() {
            return Err(LlmError::Provider {
                status: resp.status,
                body: resp.body,
            });
        }
        let parsed: ChatCompletion = serde_json::from_str(&resp.body)
            .map_err(|e| LlmError::Transport(format!("malformed completion body: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        let usage = parsed
            .usage
            .map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(LlmResponse {
            text,
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Content-addressed response cache in front of another provider.
///
/// Entries are held in memory and, when a directory is configured, written to
/// `dir/<key[0..2]>/<key>.json`. A warm cache makes zero underlying calls.
pub struct CachedProvider {
    inner: Arc<dyn LlmProvider>,
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, LlmResponse>>,
    calls: AtomicUsize,
}

impl CachedProvider {
    pub fn new(inner: Arc<dyn LlmProvider>) -> Self {
        Self {
            inner,
            dir: None,
            memory: RwLock::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_dir(inner: Arc<dyn LlmProvider>, dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| LlmError::Cache(format!("{}: {e}", dir.display())))?;
        let mut cached = Self::new(inner);
        cached.dir = Some(dir);
        Ok(cached)
    }

    /// Number of requests forwarded to the wrapped provider.
    pub fn underlying_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn entry_path(dir: &Path, key: &str) -> PathBuf {
        dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn read_disk(&self, key: &str) -> Option<LlmResponse> {
        let path = Self::entry_path(self.dir.as_ref()?, key);
        let bytes = fs::read(path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn write_disk(&self, key: &str, response: &LlmResponse) -> Result<(), LlmError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = Self::entry_path(dir, key);
        let parent = path.parent().expect("entry has parent");
        fs::create_dir_all(parent).map_err(|e| LlmError::Cache(e.to_string()))?;
        let tmp = parent.join(format!(".{key}.{}.tmp", std::process::id()));
        let bytes = serde_json::to_vec(response).map_err(|e| LlmError::Cache(e.to_string()))?;
        fs::write(&tmp, bytes).map_err(|e| LlmError::Cache(e.to_string()))?;
        fs::rename(&tmp, &path).map_err(|e| LlmError::Cache(e.to_string()))
    }
}

impl LlmProvider for CachedProvider {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let key = request.cache_key();
        if let Some(hit) = self.memory.read().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        if let Some(hit) = self.read_disk(&key) {
            self.memory
                .write()
                .unwrap_or_else(|e| e.into_inner())
                .insert(key, hit.clone());
            return Ok(hit);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(request)?;
        self.write_disk(&key, &response)?;
        self.memory
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, response.clone());
        Ok(response)
    }
}
