//! An immutable, loaded view of corpus plus index, and the match operations the
//! CLI and the HTTP service share.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use anyhow::{Context, Result};
use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use tracing::info;
use trialmatch::cascade::{index_corpus, MatchCandidate, MatchError, MatchOptions, Matcher, PairChecker};
use trialmatch::datamodel::{load_corpus, assign_split, Corpus, PatientSummary, Split, SummaryRef, TrialRecord, TrialSpace};
use trialmatch::embedding::{EmbedError, Embedder};
use trialmatch::index::{IndexError, QueryFilter, Side, VectorIndex};

use crate::config::ServiceConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    NotLoaded,
    Unauthorized,
    Provider(String),
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::BadRequest(_) => 400,
            ApiError::Unauthorized => 401,
            ApiError::NotFound(_) => 404,
            ApiError::NotLoaded => 409,
            ApiError::Provider(_) => 502,
            ApiError::Internal(_) => 500,
        }
    }

    pub fn message(&self) -> String {
        match self {
            ApiError::BadRequest(m) | ApiError::NotFound(m) | ApiError::Provider(m) | ApiError::Internal(m) => m.clone(),
            ApiError::NotLoaded => "index not loaded".to_string(),
            ApiError::Unauthorized => "missing or invalid bearer token".to_string(),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.status(), self.message())
    }
}

impl std::error::Error for ApiError {}

impl From<MatchError> for ApiError {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::InvalidArgument(m) => ApiError::BadRequest(m),
            MatchError::Embed(EmbedError::InvalidArgument(m)) => ApiError::BadRequest(m),
            MatchError::Index(IndexError::InvalidArgument(m)) => ApiError::BadRequest(m),
            MatchError::Embed(e) => ApiError::Provider(e.to_string()),
            e @ MatchError::Checker { .. } => ApiError::Provider(e.to_string()),
            e => ApiError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientMatchRequest {
    pub summary_text: Option<String>,
    pub patient_id: Option<String>,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    /// Free text: trials must be open on this date. Stored patient: picks the
    /// latest summary anchored on or before it.
    pub as_of_date: Option<NaiveDate>,
    pub show_filtered: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceMatchRequest {
    pub space_id: Option<String>,
    pub space_text: Option<String>,
    /// Free text: take the accrual window of this trial.
    pub nct_id: Option<String>,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    pub show_filtered: Option<bool>,
    pub split_in: Option<Vec<Split>>,
    /// Set false to ignore accrual windows.
    pub temporal: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceHit {
    pub rank: usize,
    pub space_id: String,
    pub nct_id: String,
    pub raw_text: String,
    pub cosine: f64,
    pub checker_prob: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientHit {
    pub rank: usize,
    pub summary_ref: String,
    pub patient_id: String,
    pub anchor_date: NaiveDate,
    pub split: Split,
    pub text: String,
    pub cosine: f64,
    pub checker_prob: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResponse<T> {
    pub query_ref: String,
    pub k: usize,
    pub threshold: f64,
    pub checker: Option<String>,
    pub n_candidates: usize,
    pub n_passed: usize,
    /// Pre-filter rank order; failed candidates only with `show_filtered`.
    pub candidates: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub index_loaded: bool,
    pub patients: usize,
    pub summaries: usize,
    pub trials: usize,
    pub spaces: usize,
    pub loaded_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Defaults {
    pub k_patient: usize,
    pub k_space: usize,
    pub threshold: f64,
}

impl From<&ServiceConfig> for Defaults {
    fn from(c: &ServiceConfig) -> Self {
        Self {
            k_patient: c.k_patient,
            k_space: c.k_space,
            threshold: c.threshold,
        }
    }
}

pub struct Snapshot {
    pub corpus: Arc<Corpus>,
    pub matcher: Matcher,
    pub loaded_at: DateTime<Utc>,
    spaces: HashMap<String, usize>,
    trials: HashMap<String, usize>,
    summaries: HashMap<String, usize>,
    by_patient: HashMap<String, Vec<usize>>,
}

impl Snapshot {
    pub fn new(corpus: Corpus, index: VectorIndex, embedder: Arc<Embedder>, checker: Option<Arc<dyn PairChecker>>) -> Self {
        let matcher = Matcher::new(Arc::new(index), embedder, &corpus).with_checker(checker);
        let mut by_patient: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, s) in corpus.summaries.iter().enumerate() {
            by_patient.entry(s.patient_id.clone()).or_default().push(i);
        }
        for v in by_patient.values_mut() {
            v.sort_by_key(|&i| corpus.summaries[i].summary_ref());
        }
        Self {
            spaces: corpus.spaces.iter().enumerate().map(|(i, s)| (s.space_id.clone(), i)).collect(),
            trials: corpus.trials.iter().enumerate().map(|(i, t)| (t.nct_id.clone(), i)).collect(),
            summaries: corpus
                .summaries
                .iter()
                .enumerate()
                .map(|(i, s)| (s.summary_ref().to_string(), i))
                .collect(),
            by_patient,
            corpus: Arc::new(corpus),
            matcher,
            loaded_at: Utc::now(),
        }
    }

    /// Loads the configured corpus, then the configured index or builds one.
    pub fn load(config: &ServiceConfig, embedder: Arc<Embedder>, checker: Option<Arc<dyn PairChecker>>) -> Result<Self> {
        let dir = config.corpus.as_ref().context("no corpus path configured")?;
        let corpus = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
        let index = match config.index.as_ref().filter(|p| p.exists()) {
            Some(p) => VectorIndex::load(p).with_context(|| format!("loading index {}", p.display()))?,
            None => index_corpus(&corpus, &embedder).context("building index")?,
        };
        info!(
            summaries = index.len(Side::Patient),
            spaces = index.len(Side::Space),
            "snapshot loaded"
        );
        Ok(Self::new(corpus, index, embedder, checker))
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            index_loaded: true,
            patients: self.by_patient.len(),
            summaries: self.matcher.index().len(Side::Patient),
            trials: self.corpus.trials.len(),
            spaces: self.matcher.index().len(Side::Space),
            loaded_at: Some(self.loaded_at),
        }
    }

    pub fn trial(&self, nct_id: &str) -> Option<&TrialRecord> {
        self.trials.get(nct_id).map(|&i| &self.corpus.trials[i])
    }

    pub fn space(&self, space_id: &str) -> Option<&TrialSpace> {
        self.spaces.get(space_id).map(|&i| &self.corpus.spaces[i])
    }

    pub fn spaces_of(&self, nct_id: &str) -> Vec<&TrialSpace> {
        let mut v: Vec<&TrialSpace> = self.corpus.spaces.iter().filter(|s| s.nct_id == nct_id).collect();
        v.sort_by_key(|s| s.ordinal);
        v
    }

    /// Latest stored summary of a patient, optionally anchored no later than `as_of`.
    pub fn patient_summary(&self, patient_id: &str, as_of: Option<NaiveDate>) -> Option<&PatientSummary> {
        self.by_patient
            .get(patient_id)?
            .iter()
            .map(|&i| &self.corpus.summaries[i])
            .filter(|s| as_of.is_none_or(|d| s.anchor_date <= d))
            .max_by_key(|s| (s.anchor_date, s.summary_ref()))
    }

    fn checker_id(&self) -> Option<String> {
        self.matcher.checker().map(|c| c.id().to_string())
    }

    pub fn match_patient(&self, req: &PatientMatchRequest, defaults: &Defaults) -> Result<MatchResponse<SpaceHit>, ApiError> {
        let opts = MatchOptions {
            k: req.k.unwrap_or(defaults.k_patient),
            threshold: req.threshold.unwrap_or(defaults.threshold),
            temporal: true,
            filter: QueryFilter::default(),
        };
        validate(opts.k, opts.threshold)?;
        let candidates = match (&req.summary_text, &req.patient_id) {
            (Some(text), None) => {
                if text.trim().is_empty() {
                    return Err(ApiError::BadRequest("summary_text is empty".into()));
                }
                self.matcher.match_patient_text(text, req.as_of_date, "user_entered", &opts)?
            }
            (None, Some(pid)) => {
                let summary = self
                    .patient_summary(pid, req.as_of_date)
                    .ok_or_else(|| ApiError::NotFound(format!("no summary for patient {pid}")))?;
                self.matcher.match_patient(summary, &opts)?
            }
            _ => return Err(ApiError::BadRequest("give exactly one of summary_text or patient_id".into())),
        };
        let query_ref = candidates
            .first()
            .map(|c| c.query_ref.clone())
            .or_else(|| req.patient_id.as_ref().and_then(|p| self.patient_summary(p, req.as_of_date)).map(|s| s.summary_ref().to_string()))
            .unwrap_or_else(|| "user_entered".to_string());
        let hits = candidates
            .iter()
            .map(|c| {
                let space = self
                    .space(&c.item_ref)
                    .ok_or_else(|| ApiError::Internal(format!("indexed space {} missing from corpus", c.item_ref)))?;
                Ok(SpaceHit {
                    rank: c.rank,
                    space_id: space.space_id.clone(),
                    nct_id: space.nct_id.clone(),
                    raw_text: space.raw_text.clone(),
                    cosine: c.cosine,
                    checker_prob: c.checker_prob,
                    passed: c.passed,
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        Ok(self.respond(query_ref, &opts, &candidates, hits, req.show_filtered.unwrap_or(false), |h| h.passed))
    }

    pub fn match_space(&self, req: &SpaceMatchRequest, defaults: &Defaults) -> Result<MatchResponse<PatientHit>, ApiError> {
        let mut opts = MatchOptions {
            k: req.k.unwrap_or(defaults.k_space),
            threshold: req.threshold.unwrap_or(defaults.threshold),
            temporal: req.temporal.unwrap_or(true),
            filter: QueryFilter::default(),
        };
        if let Some(splits) = &req.split_in {
            opts.filter.split_in = Some(splits.iter().copied().collect::<BTreeSet<_>>());
        }
        validate(opts.k, opts.threshold)?;
        let candidates = match (&req.space_id, &req.space_text) {
            (Some(id), None) => {
                let space = self
                    .space(id)
                    .ok_or_else(|| ApiError::NotFound(format!("unknown space {id}")))?;
                self.matcher.match_space(space, &opts)?
            }
            (None, Some(text)) => {
                if text.trim().is_empty() {
                    return Err(ApiError::BadRequest("space_text is empty".into()));
                }
                let window = match &req.nct_id {
                    Some(n) => Some(
                        self.trial(n)
                            .ok_or_else(|| ApiError::NotFound(format!("unknown trial {n}")))?
                            .window(),
                    ),
                    None => None,
                };
                self.matcher.match_space_text(text, window, "user_entered", &opts)?
            }
            _ => return Err(ApiError::BadRequest("give exactly one of space_id or space_text".into())),
        };
        let query_ref = req.space_id.clone().unwrap_or_else(|| "user_entered".to_string());
        let hits = candidates
            .iter()
            .map(|c| {
                let summary = self
                    .summaries
                    .get(&c.item_ref)
                    .map(|&i| &self.corpus.summaries[i])
                    .ok_or_else(|| ApiError::Internal(format!("indexed summary {} missing from corpus", c.item_ref)))?;
                let split = assign_split(&summary.patient_id).map_err(|e| ApiError::Internal(e.to_string()))?;
                Ok(PatientHit {
                    rank: c.rank,
                    summary_ref: c.item_ref.clone(),
                    patient_id: summary.patient_id.clone(),
                    anchor_date: summary.anchor_date,
                    split,
                    text: summary.text.clone(),
                    cosine: c.cosine,
                    checker_prob: c.checker_prob,
                    passed: c.passed,
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        Ok(self.respond(query_ref, &opts, &candidates, hits, req.show_filtered.unwrap_or(false), |h| h.passed))
    }

    fn respond<T>(
        &self,
        query_ref: String,
        opts: &MatchOptions,
        candidates: &[MatchCandidate],
        hits: Vec<T>,
        show_filtered: bool,
        passed: impl Fn(&T) -> bool,
    ) -> MatchResponse<T> {
        let n_passed = candidates.iter().filter(|c| c.passed).count();
        MatchResponse {
            query_ref,
            k: opts.k,
            threshold: opts.threshold,
            checker: self.checker_id(),
            n_candidates: candidates.len(),
            n_passed,
            candidates: hits.into_iter().filter(|h| show_filtered || passed(h)).collect(),
        }
    }

    pub fn summary_by_ref(&self, r: &SummaryRef) -> Option<&PatientSummary> {
        self.summaries.get(&r.to_string()).map(|&i| &self.corpus.summaries[i])
    }
}

fn validate(k: usize, threshold: f64) -> Result<(), ApiError> {
    if k == 0 {
        return Err(ApiError::BadRequest("k must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ApiError::BadRequest(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(())
}

/// Tab-separated candidate lines: rank, id, trial or split, cosine, checker
/// probability (`-` without a checker), passed.
pub fn space_hits_tsv(resp: &MatchResponse<SpaceHit>) -> String {
    resp.candidates
        .iter()
        .map(|h| {
            format!(
                "{}\t{}\t{}\t{:.6}\t{}\t{}\n",
                h.rank,
                h.space_id,
                h.nct_id,
                h.cosine,
                h.checker_prob.map_or("-".to_string(), |p| format!("{p:.6}")),
                h.passed
            )
        })
        .collect()
}

pub fn patient_hits_tsv(resp: &MatchResponse<PatientHit>) -> String {
    resp.candidates
        .iter()
        .map(|h| {
            format!(
                "{}\t{}\t{}\t{:.6}\t{}\t{}\n",
                h.rank,
                h.summary_ref,
                h.split,
                h.cosine,
                h.checker_prob.map_or("-".to_string(), |p| format!("{p:.6}")),
                h.passed
            )
        })
        .collect()
}
