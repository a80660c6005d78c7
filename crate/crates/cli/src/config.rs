//! Service and pipeline configuration: a TOML file, then environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckerKind {
    None,
    Lexical,
    Llm,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// OpenAI-compatible chat endpoint base, e.g. `http://host:8000/v1`.
    pub llm_url: Option<String>,
    pub llm_model: String,
    pub llm_token_env: Option<String>,
    pub llm_cache_dir: Option<PathBuf>,
    pub llm_max_in_flight: usize,
    /// Canned responses for the mock chat provider.
    pub llm_fixtures: Option<PathBuf>,
    pub embedding_url: Option<String>,
    pub embedding_dimension: usize,
    pub embedding_token_env: Option<String>,
    pub tagger_url: Option<String>,
    pub tagger_token_env: Option<String>,
    /// Defaults to `remote` when `checker_url` is set, else `lexical`.
    pub checker: Option<CheckerKind>,
    pub checker_url: Option<String>,
    pub checker_token_env: Option<String>,
    pub registry_base_url: String,
    pub registry_cache_dir: Option<PathBuf>,
    pub registry_rate_limit: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            llm_url: None,
            llm_model: "mock".to_string(),
            llm_token_env: None,
            llm_cache_dir: None,
            llm_max_in_flight: 8,
            llm_fixtures: None,
            embedding_url: None,
            embedding_dimension: trialmatch::embedding::MOCK_DIMENSION,
            embedding_token_env: None,
            tagger_url: None,
            tagger_token_env: None,
            checker: None,
            checker_url: None,
            checker_token_env: None,
            registry_base_url: trialmatch::ctgov::DEFAULT_BASE_URL.to_string(),
            registry_cache_dir: None,
            registry_rate_limit: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub corpus: Option<PathBuf>,
    /// Prebuilt index; built from the corpus at load time when absent.
    pub index: Option<PathBuf>,
    pub embedding_cache: Option<PathBuf>,
    pub k_patient: usize,
    pub k_space: usize,
    pub threshold: f64,
    pub require_auth: bool,
    pub auth_token_env: String,
    /// Allowed browser origin; `*` allows any.
    pub cors_origin: Option<String>,
    pub max_concurrency: usize,
    pub providers: ProviderConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".to_string(),
            corpus: None,
            index: None,
            embedding_cache: None,
            k_patient: 10,
            k_space: 20,
            threshold: 0.5,
            require_auth: false,
            auth_token_env: "TRIALMATCH_API_TOKEN".to_string(),
            cors_origin: Some("*".to_string()),
            max_concurrency: 16,
            providers: ProviderConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads the file when given, applies `TRIALMATCH_*` environment overrides,
    /// and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok());
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("TRIALMATCH_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = get("TRIALMATCH_CORPUS") {
            self.corpus = Some(v.into());
        }
        if let Some(v) = get("TRIALMATCH_INDEX") {
            self.index = Some(v.into());
        }
        let p = &mut self.providers;
        if let Some(v) = get("TRIALMATCH_LLM_URL") {
            p.llm_url = Some(v);
        }
        if let Some(v) = get("TRIALMATCH_LLM_MODEL") {
            p.llm_model = v;
        }
        if let Some(v) = get("TRIALMATCH_EMBEDDING_URL") {
            p.embedding_url = Some(v);
        }
        if let Some(v) = get("TRIALMATCH_TAGGER_URL") {
            p.tagger_url = Some(v);
        }
        if let Some(v) = get("TRIALMATCH_CHECKER_URL") {
            p.checker_url = Some(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_patient == 0 || self.k_space == 0 {
            bail!("k_patient and k_space must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            bail!("threshold {} outside [0, 1]", self.threshold);
        }
        if self.max_concurrency == 0 {
            bail!("max_concurrency must be at least 1");
        }
        if self.providers.checker == Some(CheckerKind::Remote) && self.providers.checker_url.is_none() {
            bail!("checker = \"remote\" needs checker_url");
        }
        Ok(())
    }

    pub fn checker_kind(&self) -> CheckerKind {
        self.providers.checker.unwrap_or(if self.providers.checker_url.is_some() {
            CheckerKind::Remote
        } else {
            CheckerKind::Lexical
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ServiceConfig::default().validate().unwrap();
    }

    #[test]
    fn env_overrides_file_values() {
        let mut c: ServiceConfig = toml::from_str("listen = \"0.0.0.0:1\"\n[providers]\nllm_model = \"m\"\n").unwrap();
        c.apply_env(|k| (k == "TRIALMATCH_LLM_MODEL").then(|| "other".to_string()));
        assert_eq!(c.listen, "0.0.0.0:1");
        assert_eq!(c.providers.llm_model, "other");
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(toml::from_str::<ServiceConfig>("lisen = \"x\"").is_err());
    }

    #[test]
    fn bad_threshold_rejected() {
        let c = ServiceConfig { threshold: 1.5, ..ServiceConfig::default() };
        assert!(c.validate().is_err());
    }
}
