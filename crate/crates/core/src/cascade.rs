//! Two-stage matching: cosine top-k retrieval, then an optional pair checker that
//! flags which of the retrieved candidates pass a probability threshold.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{assign_split, Corpus, OpenWindow, PatientSummary, TrialSpace};
use crate::embedding::{mock_tokens, EmbedError, Embedder};
use crate::http::HttpClient;
use crate::index::{IndexError, IndexedItem, ItemMeta, QueryFilter, Side, VectorIndex};
use crate::llm::{parse_space_list, LlmGateway};

pub const DEFAULT_K_PATIENT: usize = 10;
pub const DEFAULT_K_SPACE: usize = 20;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("checker failed: {message}")]
    Checker {
        message: String,
        /// Retrieval results without checker scores, all flagged not passed.
        partial: Vec<MatchCandidate>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub query_ref: String,
    pub item_ref: String,
    /// 1-based rank before checker filtering.
    pub rank: usize,
    pub cosine: f64,
    pub checker_prob: Option<f64>,
    pub passed: bool,
}

/// Pair classifier estimating the probability that a (summary, space) pair
/// would pass the reasonable-consideration check.
pub trait PairChecker: Send + Sync {
    fn id(&self) -> &str;
    /// One probability per `(summary_text, space_text)` pair, in order.
    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, String>;

    fn score(&self, summary_text: &str, space_text: &str) -> Result<f64, String> {
        Ok(self.score_batch(&[(summary_text, space_text)])?[0])
    }
}

/// Always returns the same probability.
#[derive(Debug, Clone, Copy)]
pub struct ConstantChecker(pub f64);

impl PairChecker for ConstantChecker {
    fn id(&self) -> &str {
        "constant"
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, String> {
        Ok(vec![self.0; pairs.len()])
    }
}

/// Returns 1.0 for pairs known to be positive and 0.0 for everything else.
#[derive(Debug, Clone, Default)]
pub struct LabelChecker {
    positives: HashSet<(String, String)>,
}

impl LabelChecker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, summary_text: &str, space_text: &str) {
        self.positives
            .insert((summary_text.to_string(), space_text.to_string()));
    }

    /// Positives taken from the corpus labels (any provenance).
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut checker = Self::new();
        for label in corpus.labels.iter().filter(|l| l.label) {
            if let (Some(summary), Some(space)) = (corpus.summary(&label.summary_ref), corpus.space(&label.space_id)) {
                checker.insert(&summary.text, &space.raw_text);
            }
        }
        checker
    }
}

impl PairChecker for LabelChecker {
    fn id(&self) -> &str {
        "labels"
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, String> {
        Ok(pairs
            .iter()
            .map(|(s, p)| {
                if self.positives.contains(&(s.to_string(), p.to_string())) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    }
}

const FIELD_WORDS: &[&str] = &[
    "cancer", "type", "allowed", "required", "excluded", "histology", "burden", "prior",
    "treatment", "biomarkers", "biomarker", "any",
];

fn content_tokens(text: &str) -> HashSet<String> {
    mock_tokens(text)
        .into_iter()
        .filter(|t| !FIELD_WORDS.contains(&t.as_str()))
        .collect()
}

/// Offline checker based on word overlap.
///
/// The space text is parsed into fields. Content tokens (lowercased words minus
/// stopwords and field-name words) of the allowed/required fields form the wanted
/// set, and the score is the fraction of wanted tokens present in the summary.
/// Each token of an excluded field found in the summary halves the score. When no
/// field parses, all content tokens of the space text are wanted.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlapChecker;

impl LexicalOverlapChecker {
    pub fn probability(summary_text: &str, space_text: &str) -> f64 {
        let summary = content_tokens(summary_text);
        let parsed = parse_space_list(&format!("1. {space_text}"));
        let fields = parsed.first().map(|p| p.fields.clone()).unwrap_or_default();
        let (mut wanted, mut excluded) = (HashSet::new(), HashSet::new());
        if fields.is_empty() {
            wanted = content_tokens(space_text);
        }
        for (field, value) in &fields {
            let target = if field.label().ends_with("excluded") { &mut excluded } else { &mut wanted };
            target.extend(content_tokens(value));
        }
        let mut p = if wanted.is_empty() {
            0.5
        } else {
            wanted.iter().filter(|t| summary.contains(*t)).count() as f64 / wanted.len() as f64
        };
        for t in &excluded {
            if summary.contains(t) {
                p *= 0.5;
            }
        }
        p
    }
}

impl PairChecker for LexicalOverlapChecker {
    fn id(&self) -> &str {
        "lexical-overlap"
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, String> {
        Ok(pairs.iter().map(|(s, p)| Self::probability(s, p)).collect())
    }
}

/// Checker behind the scoring-service contract:
/// Asks the reasonable-consideration prompt directly: 1.0 for Yes!, 0.0 for No!.
/// An unparseable answer is an error.
#[derive(Debug, Clone)]
pub struct GatewayChecker {
    gateway: Arc<LlmGateway>,
}

impl GatewayChecker {
    pub fn new(gateway: Arc<LlmGateway>) -> Self {
        Self { gateway }
    }
}

impl PairChecker for GatewayChecker {
    fn id(&self) -> &str {
        "llm"
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, String> {
        pairs
            .iter()
            .map(|(summary, space)| {
                self.gateway
                    .check_texts(summary, space)
                    .map(|d| if d.value { 1.0 } else { 0.0 })
                    .map_err(|e| e.to_string())
            })
            .collect()
    }
}

/// `POST {url}` with `{"pairs": [{"summary": .., "space": ..}, ..]}` answering
/// `{"probabilities": [..]}`.
#[derive(Debug, Clone)]
pub struct RemoteChecker {
    url: String,
    token: Option<String>,
    http: HttpClient,
}

#[derive(Deserialize)]
struct ProbabilitiesBody {
    probabilities: Vec<f64>,
}

impl RemoteChecker {
    pub fn new(url: impl Into<String>, token: Option<String>) -> Self {
        Self {
            url: url.into(),
            token,
            http: HttpClient::new(Duration::from_secs(120)),
        }
    }
}

impl PairChecker for RemoteChecker {
    fn id(&self) -> &str {
        &self.url
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, String> {
        let body = serde_json::json!({
            "pairs": pairs
                .iter()
                .map(|(s, p)| serde_json::json!({"summary": s, "space": p}))
                .collect::<Vec<_>>(),
        });
        let resp = self.http.post_json(&self.url, &body, self.token.as_deref())?;
        if !resp.is_success() {
            return Err(format!("HTTP {}: {}", resp.status, resp.body));
        }
        let parsed: ProbabilitiesBody = serde_json::from_str(&resp.body).map_err(|e| e.to_string())?;
        Ok(parsed.probabilities)
    }
}

/// Embeds every summary and space of the corpus into a fresh index.
///
/// Summaries are keyed by their summary reference and spaces by space id. Spaces
/// take their open window from their trial.
pub fn index_corpus(corpus: &Corpus, embedder: &Embedder) -> Result<VectorIndex, MatchError> {
    let mut items = Vec::new();
    let summary_texts: Vec<&str> = corpus.summaries.iter().map(|s| s.text.as_str()).collect();
    let vectors = embedder.embed(&summary_texts)?;
    for (s, v) in corpus.summaries.iter().zip(vectors) {
        let split = assign_split(&s.patient_id).map_err(|e| MatchError::InvalidArgument(e.to_string()))?;
        items.push(IndexedItem {
            item_id: s.summary_ref().to_string(),
            side: Side::Patient,
            vector: v,
            metadata: ItemMeta::patient(s.anchor_date, split),
        });
    }
    let space_texts: Vec<&str> = corpus.spaces.iter().map(|s| s.raw_text.as_str()).collect();
    let vectors = embedder.embed(&space_texts)?;
    for (s, v) in corpus.spaces.iter().zip(vectors) {
        let trial = corpus
            .trial(&s.nct_id)
            .ok_or_else(|| MatchError::NotFound(format!("trial {} of space {}", s.nct_id, s.space_id)))?;
        items.push(IndexedItem {
            item_id: s.space_id.clone(),
            side: Side::Space,
            vector: v,
            metadata: ItemMeta::space(&s.nct_id, trial.window()),
        });
    }
    Ok(VectorIndex::build(embedder.dimension(), items)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub k: usize,
    pub threshold: f64,
    /// Restrict by the query's anchor date (patient queries) or accrual window
    /// (space queries) when known.
    pub temporal: bool,
    pub filter: QueryFilter,
}

impl MatchOptions {
    pub fn patient_default() -> Self {
        Self {
            k: DEFAULT_K_PATIENT,
            threshold: DEFAULT_THRESHOLD,
            temporal: true,
            filter: QueryFilter::default(),
        }
    }

    pub fn space_default() -> Self {
        Self {
            k: DEFAULT_K_SPACE,
            ..Self::patient_default()
        }
    }
}

/// Matcher over one index snapshot and the corpus texts it was built from.
#[derive(Clone)]
pub struct Matcher {
    index: Arc<VectorIndex>,
    embedder: Arc<Embedder>,
    checker: Option<Arc<dyn PairChecker>>,
    summary_texts: Arc<HashMap<String, String>>,
    space_texts: Arc<HashMap<String, String>>,
    windows: Arc<HashMap<String, OpenWindow>>,
}

impl std::fmt::Debug for Matcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Matcher")
            .field("patients", &self.index.len(Side::Patient))
            .field("spaces", &self.index.len(Side::Space))
            .field("checker", &self.checker.as_ref().map(|c| c.id().to_string()))
            .finish()
    }
}

impl Matcher {
    pub fn new(index: Arc<VectorIndex>, embedder: Arc<Embedder>, corpus: &Corpus) -> Self {
        Self {
            index,
            embedder,
            checker: None,
            summary_texts: Arc::new(
                corpus
                    .summaries
                    .iter()
                    .map(|s| (s.summary_ref().to_string(), s.text.clone()))
                    .collect(),
            ),
            space_texts: Arc::new(
                corpus
                    .spaces
                    .iter()
                    .map(|s| (s.space_id.clone(), s.raw_text.clone()))
                    .collect(),
            ),
            windows: Arc::new(
                corpus
                    .trials
                    .iter()
                    .map(|t| (t.nct_id.clone(), t.window()))
                    .collect(),
            ),
        }
    }

    pub fn with_checker(mut self, checker: Option<Arc<dyn PairChecker>>) -> Self {
        self.checker = checker;
        self
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn checker(&self) -> Option<&Arc<dyn PairChecker>> {
        self.checker.as_ref()
    }

    /// Ranks spaces for a stored summary, filtering to trials open at its anchor date.
    pub fn match_patient(&self, summary: &PatientSummary, opts: &MatchOptions) -> Result<Vec<MatchCandidate>, MatchError> {
        self.match_patient_text(&summary.text, Some(summary.anchor_date), &summary.summary_ref().to_string(), opts)
    }

    /// Ranks spaces for free summary text.
    pub fn match_patient_text(
        &self,
        summary_text: &str,
        anchor: Option<NaiveDate>,
        query_ref: &str,
        opts: &MatchOptions,
    ) -> Result<Vec<MatchCandidate>, MatchError> {
        let mut filter = opts.filter.clone();
        if opts.temporal && filter.temporal_as_of.is_none() {
            filter.temporal_as_of = anchor;
        }
        let query = self.embedder.embed_one(summary_text)?;
        let hits = self.index.top_k(&query.values, Side::Space, opts.k.max(1), &filter)?;
        let pairs: Vec<(String, String)> = hits
            .iter()
            .map(|(id, _)| {
                let space = self
                    .space_texts
                    .get(id)
                    .ok_or_else(|| MatchError::NotFound(format!("space text for {id}")))?;
                Ok((summary_text.to_string(), space.clone()))
            })
            .collect::<Result<_, MatchError>>()?;
        self.finish(query_ref, hits, &pairs, opts)
    }

    /// Ranks stored summaries for a stored space, keeping patients whose anchor
    /// date falls inside the trial's accrual window.
    pub fn match_space(&self, space: &TrialSpace, opts: &MatchOptions) -> Result<Vec<MatchCandidate>, MatchError> {
        let window = self.windows.get(&space.nct_id).copied();
        self.match_space_text(&space.raw_text, window, &space.space_id, opts)
    }

    pub fn match_space_text(
        &self,
        space_text: &str,
        window: Option<OpenWindow>,
        query_ref: &str,
        opts: &MatchOptions,
    ) -> Result<Vec<MatchCandidate>, MatchError> {
        let mut filter = opts.filter.clone();
        if opts.temporal && filter.anchor_within.is_none() {
            filter.anchor_within = window;
        }
        let query = self.embedder.embed_one(space_text)?;
        let hits = self.index.top_k(&query.values, Side::Patient, opts.k.max(1), &filter)?;
        let pairs: Vec<(String, String)> = hits
            .iter()
            .map(|(id, _)| {
                let summary = self
                    .summary_texts
                    .get(id)
                    .ok_or_else(|| MatchError::NotFound(format!("summary text for {id}")))?;
                Ok((summary.clone(), space_text.to_string()))
            })
            .collect::<Result<_, MatchError>>()?;
        self.finish(query_ref, hits, &pairs, opts)
    }

    fn finish(
        &self,
        query_ref: &str,
        hits: Vec<(String, f64)>,
        pairs: &[(String, String)],
        opts: &MatchOptions,
    ) -> Result<Vec<MatchCandidate>, MatchError> {
        if !(0.0..=1.0).contains(&opts.threshold) {
            return Err(MatchError::InvalidArgument(format!(
                "threshold {} outside [0, 1]",
                opts.threshold
            )));
        }
        let mut candidates: Vec<MatchCandidate> = hits
            .into_iter()
            .enumerate()
            .map(|(i, (item_ref, cosine))| MatchCandidate {
                query_ref: query_ref.to_string(),
                item_ref,
                rank: i + 1,
                cosine,
                checker_prob: None,
                passed: true,
            })
            .collect();
        let Some(checker) = &self.checker else {
            return Ok(candidates);
        };
        if candidates.is_empty() {
            return Ok(candidates);
        }
        let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let fail = |message: String, mut partial: Vec<MatchCandidate>| {
            for c in &mut partial {
                c.passed = false;
            }
            MatchError::Checker { message, partial }
        };
        let probs = match checker.score_batch(&refs) {
            Ok(p) => p,
            Err(e) => return Err(fail(e, candidates)),
        };
        if probs.len() != candidates.len() {
            let msg = format!("{} probabilities for {} pairs", probs.len(), candidates.len());
            return Err(fail(msg, candidates));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(fail(format!("probability {bad} outside [0, 1]"), candidates));
        }
        for (c, p) in candidates.iter_mut().zip(probs) {
            c.checker_prob = Some(p);
            c.passed = p >= opts.threshold;
        }
        Ok(candidates)
    }
}

/// (lower median, mean) of per-query surviving-candidate counts; `None` for no queries.
pub fn result_count_stats(counts: &[usize]) -> Option<(usize, f64)> {
    if counts.is_empty() {
        return None;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let median = sorted[(sorted.len() - 1) / 2];
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    Some((median, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_stats() {
        assert_eq!(result_count_stats(&[8, 8, 8]), Some((8, 8.0)));
        assert_eq!(result_count_stats(&[10, 6]), Some((6, 8.0)));
        assert_eq!(result_count_stats(&[]), None);
    }

    #[test]
    fn overlap_checker() {
        let space = "Cancer type allowed: melanoma. Biomarkers required: BRAF V600E mutation.";
        let good = LexicalOverlapChecker::probability("Cancer type: melanoma\nBiomarkers: BRAF V600E mutation", space);
        let bad = LexicalOverlapChecker::probability("Cancer type: breast cancer", space);
        assert_eq!(good, 1.0);
        assert!(bad < 0.5);
    }
}
