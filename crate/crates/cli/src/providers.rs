//! Builds the model providers from configuration, falling back to the offline
//! mocks for anything not configured (or everything, with `--mock-providers`).

use std::sync::Arc;

use anyhow::{Context, Result};
use tracing::info;
use trialmatch::cascade::{GatewayChecker, LexicalOverlapChecker, PairChecker, RemoteChecker};
use trialmatch::condenser::{LexiconTagger, RemoteTagger, SentenceTagger};
use trialmatch::ctgov::{RegistryClient, RegistryConfig};
use trialmatch::embedding::{Embedder, MockEmbedder, RemoteEmbedder};
use trialmatch::llm::{CachedProvider, LlmGateway, LlmProvider, MockLlm, OpenAiChatProvider};

use crate::config::{CheckerKind, ServiceConfig};

fn token(var: &Option<String>) -> Option<String> {
    var.as_deref().and_then(|v| std::env::var(v).ok())
}

pub struct Providers {
    pub gateway: Arc<LlmGateway>,
    pub embedder: Arc<Embedder>,
    pub tagger: Arc<dyn SentenceTagger>,
    pub checker: Option<Arc<dyn PairChecker>>,
}

impl Providers {
    pub fn build(config: &ServiceConfig, mock: bool) -> Result<Self> {
        let p = &config.providers;
        let llm: Arc<dyn LlmProvider> = match (&p.llm_url, mock) {
            (Some(url), false) => Arc::new(OpenAiChatProvider::new(url.clone(), token(&p.llm_token_env))),
            _ => {
                let mut m = MockLlm::new();
                if let Some(path) = &p.llm_fixtures {
                    let n = m
                        .load_fixtures(path)
                        .with_context(|| format!("loading LLM fixtures {}", path.display()))?;
                    info!(fixtures = n, "mock LLM fixtures loaded");
                }
                Arc::new(m)
            }
        };
        let llm: Arc<dyn LlmProvider> = match &p.llm_cache_dir {
            Some(dir) if !mock => Arc::new(CachedProvider::with_dir(llm, dir.clone())?),
            _ => llm,
        };
        let model = if mock { "mock".to_string() } else { p.llm_model.clone() };
        let gateway = Arc::new(LlmGateway::new(llm, model).with_max_in_flight(p.llm_max_in_flight.max(1)));

        let embedder = Arc::new(match (&p.embedding_url, mock) {
            (Some(url), false) => Embedder::new(Arc::new(RemoteEmbedder::new(
                url.clone(),
                p.embedding_dimension,
                token(&p.embedding_token_env),
            ))),
            _ => Embedder::new(Arc::new(MockEmbedder::new())),
        });
        if let Some(cache) = config.embedding_cache.as_ref().filter(|c| c.exists()) {
            let n = embedder.load_cache(cache)?;
            info!(vectors = n, "embedding cache loaded");
        }

        let tagger: Arc<dyn SentenceTagger> = match (&p.tagger_url, mock) {
            (Some(url), false) => Arc::new(RemoteTagger::new(url.clone(), token(&p.tagger_token_env))),
            _ => Arc::new(LexiconTagger),
        };

        let checker: Option<Arc<dyn PairChecker>> = match config.checker_kind() {
            CheckerKind::None => None,
            CheckerKind::Llm => Some(Arc::new(GatewayChecker::new(gateway.clone()))),
            CheckerKind::Remote if !mock => Some(Arc::new(RemoteChecker::new(
                p.checker_url.clone().unwrap_or_default(),
                token(&p.checker_token_env),
            ))),
            CheckerKind::Remote | CheckerKind::Lexical => Some(Arc::new(LexicalOverlapChecker)),
        };
        Ok(Self {
            gateway,
            embedder,
            tagger,
            checker,
        })
    }
}

pub fn registry(config: &ServiceConfig, base_url: Option<String>, cache_dir: Option<std::path::PathBuf>, rate: Option<f64>) -> RegistryClient {
    let p = &config.providers;
    RegistryClient::new(RegistryConfig {
        base_url: base_url.unwrap_or_else(|| p.registry_base_url.clone()),
        cache_dir: cache_dir.or_else(|| p.registry_cache_dir.clone()),
        rate_limit: rate.unwrap_or(p.registry_rate_limit),
        ..RegistryConfig::default()
    })
}
