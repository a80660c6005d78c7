//! Single point of chat-model access.
//!
//! [`LlmGateway`] renders the versioned templates, calls an [`LlmProvider`],
//! parses the answer into typed values and retries once with a format reminder
//! when the answer does not parse.

pub mod mock;
pub mod parse;
pub mod prompts;
pub mod provider;

use std::collections::HashSet;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::condenser::CondensedRecord;
use crate::datamodel::{PatientSummary, SummarySource, TrialRecord, TrialSpace};
use crate::hashing::sha256_hex;

pub use mock::MockLlm;
pub use parse::{parse_decision, parse_organ, parse_space_list, OrganLabel, ParsedSpace};
pub use prompts::{bindings, render_prompt, Bindings, TemplateId};
pub use provider::{CachedProvider, OpenAiChatProvider};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("could not parse a space list from the response")]
    Extraction { raw: String },
    #[error("no Yes!/No! decision in the response")]
    DecisionParse { raw: String },
    #[error("response is not in the organ vocabulary: {raw:?}")]
    VocabularyMiss { raw: String },
    #[error("could not parse concept tags from the response: {raw:?}")]
    TagParse { raw: String },
    #[error("summarization failed: {0}")]
    Summarization(String),
    #[error("cache error: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f32,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Which template and bindings produced a request. Not sent over the wire and
/// not part of the cache key; offline providers use it to answer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTag {
    pub template: TemplateId,
    pub bindings: Bindings,
    /// 0 for the first attempt, 1 for the format-reminder retry.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub decoding: Decoding,
    #[serde(skip)]
    pub tag: Option<PromptTag>,
}

impl LlmRequest {
    /// Content address: SHA-256 over the canonical JSON of model, messages and decoding.
    pub fn cache_key(&self) -> String {
        let canonical = serde_json::json!({
            "model": self.model,
            "messages": self.messages,
            "decoding": self.decoding,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    #[serde(default)]
    pub usage: TokenUsage,
    #[serde(default)]
    pub latency_ms: u64,
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;
}

/// A reasonable-consideration judgment with the text it was read from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub value: bool,
    pub raw_text: String,
}

/// Counting semaphore bounding concurrent provider calls.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        InFlightGuard { owner: self }
    }
}

struct InFlightGuard<'a> {
    owner: &'a InFlight,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.owner.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.owner.freed.notify_one();
    }
}

const EXTRACTION_REMINDER: &str = "Reminder: output only the numbered list of trial spaces, one per line, each line starting with its number and a period.";
const DECISION_REMINDER: &str = "Reminder: end your answer with the one-word answer \"Yes!\" or \"No!\", including the exclamation point.";
const TAG_REMINDER: &str = "Reminder: answer only with concept names separated by commas, or the single word none.";

#[derive(Clone)]
pub struct LlmGateway {
    provider: Arc<dyn LlmProvider>,
    model: String,
    temperature: f32,
    in_flight: Arc<InFlight>,
}

impl std::fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmGateway")
            .field("provider", &self.provider.name())
            .field("model", &self.model)
            .finish()
    }
}

impl LlmGateway {
    pub fn new(provider: Arc<dyn LlmProvider>, model: impl Into<String>) -> Self {
        Self {
            provider,
            model: model.into(),
            temperature: 0.0,
            in_flight: Arc::new(InFlight::new(8)),
        }
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = Arc::new(InFlight::new(limit));
        self
    }

    pub fn with_temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn build_request(
        &self,
        template: TemplateId,
        bindings: &Bindings,
        seed: Option<u64>,
    ) -> Result<LlmRequest, LlmError> {
        Ok(LlmRequest {
            model: self.model.clone(),
            messages: render_prompt(template, bindings)?,
            decoding: Decoding {
                temperature: self.temperature,
                max_tokens: template.max_output_tokens(),
                seed,
            },
            tag: Some(PromptTag {
                template,
                bindings: bindings.clone(),
                attempt: 0,
            }),
        })
    }

    fn send(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let _slot = self.in_flight.acquire();
        self.provider.complete(request)
    }

    /// Renders and sends one template, returning the raw response.
    pub fn complete_template(
        &self,
        template: TemplateId,
        bindings: &Bindings,
        seed: Option<u64>,
    ) -> Result<LlmResponse, LlmError> {
        let request = self.build_request(template, bindings, seed)?;
        self.send(&request)
    }

    /// Sends a template, and if `parse` rejects the answer, resends once with the
    /// previous answer and a reminder appended. The inner `Err` carries the last
    /// unparseable response text.
    fn with_retry<T>(
        &self,
        template: TemplateId,
        bindings: &Bindings,
        reminder: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<Result<(T, String), String>, LlmError> {
        let mut request = self.build_request(template, bindings, None)?;
        let first = self.send(&request)?;
        if let Some(v) = parse(&first.text) {
            return Ok(Ok((v, first.text)));
        }
        warn!(template = %template, "unparseable response, retrying with format reminder");
        request.messages.push(ChatMessage {
            role: ChatRole::Assistant,
            content: first.text.clone(),
        });
        request.messages.push(ChatMessage {
            role: ChatRole::User,
            content: reminder.to_string(),
        });
        if let Some(tag) = request.tag.as_mut() {
            tag.attempt = 1;
        }
        let second = self.send(&request)?;
        Ok(match parse(&second.text) {
            Some(v) => Ok((v, second.text)),
            None => Err(second.text),
        })
    }

    /// Extracts the trial's spaces. Ordinals follow list order after dropping
    /// items whose normalized text repeats an earlier item.
    pub fn extract_trial_spaces(&self, trial: &TrialRecord) -> Result<Vec<TrialSpace>, LlmError> {
        if trial.eligibility_text.trim().is_empty() {
            return Err(LlmError::InvalidArgument(format!(
                "trial {} has empty eligibility text",
                trial.nct_id
            )));
        }
        let b = bindings([("trial", trial.eligibility_text.as_str())]);
        let parse = |t: &str| {
            let items = parse_space_list(t);
            (!items.is_empty()).then_some(items)
        };
        let (items, _) = self
            .with_retry(TemplateId::SpaceExtraction, &b, EXTRACTION_REMINDER, parse)?
            .map_err(|raw| LlmError::Extraction { raw })?;
        Ok(spaces_from_items(&trial.nct_id, items))
    }

    /// Summarizes a condensed record. The provider text is kept verbatim.
    pub fn summarize_patient(
        &self,
        condensed: &CondensedRecord,
        source: SummarySource,
    ) -> Result<PatientSummary, LlmError> {
        if condensed.text.trim().is_empty() {
            return Err(LlmError::InvalidArgument("condensed record is empty".into()));
        }
        let response = self.complete_template(
            TemplateId::PatientSummarization,
            &bindings([("the_patient", condensed.text.as_str())]),
            None,
        )?;
        if response.text.trim().is_empty() {
            return Err(LlmError::Summarization(format!(
                "empty response for patient {}",
                condensed.patient_id
            )));
        }
        Ok(PatientSummary {
            patient_id: condensed.patient_id.clone(),
            anchor_date: condensed.as_of_date,
            source,
            text: response.text,
        })
    }

    pub fn check_reasonable(
        &self,
        summary: &PatientSummary,
        space: &TrialSpace,
    ) -> Result<Decision, LlmError> {
        self.check_texts(&summary.text, &space.raw_text)
    }

    /// Reasonable-consideration check over raw texts.
    pub fn check_texts(&self, summary_text: &str, space_text: &str) -> Result<Decision, LlmError> {
        if summary_text.trim().is_empty() || space_text.trim().is_empty() {
            return Err(LlmError::InvalidArgument(
                "summary and space text must be non-empty".into(),
            ));
        }
        let b = bindings([("trial_summary", space_text), ("patient_summary", summary_text)]);
        let (value, raw_text) = self
            .with_retry(TemplateId::ReasonableConsideration, &b, DECISION_REMINDER, parse_decision)?
            .map_err(|raw| LlmError::DecisionParse { raw })?;
        Ok(Decision { value, raw_text })
    }

    pub fn classify_organ(&self, text: &str) -> Result<OrganLabel, LlmError> {
        if text.trim().is_empty() {
            return Err(LlmError::InvalidArgument("empty text".into()));
        }
        let response = self.complete_template(TemplateId::OncotreeOrgan, &bindings([("txt", text)]), None)?;
        parse_organ(&response.text).ok_or(LlmError::VocabularyMiss { raw: response.text })
    }

    /// Concept flags for one sentence, in [`crate::lexicon::CONCEPTS`] order.
    pub fn tag_sentence(&self, sentence: &str) -> Result<[bool; 6], LlmError> {
        let b = bindings([("sentence", sentence)]);
        let (flags, _) = self
            .with_retry(TemplateId::SentenceTagging, &b, TAG_REMINDER, parse::parse_concept_tags)?
            .map_err(|raw| LlmError::TagParse { raw })?;
        Ok(flags)
    }

    /// Free-text generation (synthetic documents). `seed` is forwarded as a
    /// decoding parameter so distinct patients get distinct outputs.
    pub fn generate(&self, template: TemplateId, bindings: &Bindings, seed: u64) -> Result<String, LlmError> {
        let response = self.complete_template(template, bindings, Some(seed))?;
        if response.text.trim().is_empty() {
            return Err(LlmError::Transport(format!("empty {template} response")));
        }
        Ok(response.text)
    }
}

/// Turns parsed list items into spaces of one trial, deduplicating on normalized text.
pub fn spaces_from_items(nct_id: &str, items: Vec<ParsedSpace>) -> Vec<TrialSpace> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in items {
        if !seen.insert(parse::normalize_space_text(&item.raw_text)) {
            continue;
        }
        let ordinal = out.len() as u32 + 1;
        let mut space = TrialSpace::new(nct_id, ordinal, item.raw_text.clone());
        for (field, value) in item.fields {
            space.set_field(field, Some(value));
        }
        out.push(space);
    }
    out
}
