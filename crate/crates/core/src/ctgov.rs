//! Registry client: study lookup by NCT id, open-trial enumeration, and seeded
//! sampling. Raw payloads are cached on disk and egress is rate limited.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDate, Utc};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, warn};

use crate::datamodel::{validate_nct_id, TrialRecord};
use crate::http::HttpClient;

pub const DEFAULT_BASE_URL: &str = "https://clinicaltrials.gov/api/v2";
pub const ENDPOINT_VERSION: &str = "v2";
pub const MAX_PAGE_SIZE: usize = 1000;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("study {0} not found")]
    NotFound(String),
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("unexpected registry payload: {0}")]
    Payload(String),
    #[error("cache error on {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    RecruitingOnly,
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryQuery {
    pub condition: String,
    /// Keep studies that had started by this date.
    pub as_of: Option<NaiveDate>,
    pub status_filter: StatusFilter,
    pub page_size: usize,
}

impl RegistryQuery {
    pub fn new(condition: impl Into<String>) -> Self {
        Self {
            condition: condition.into(),
            as_of: None,
            status_filter: StatusFilter::RecruitingOnly,
            page_size: MAX_PAGE_SIZE,
        }
    }

    fn validate(&self) -> Result<(), RegistryError> {
        if self.condition.trim().is_empty() {
            return Err(RegistryError::InvalidArgument("condition must be non-empty".into()));
        }
        if self.page_size == 0 || self.page_size > MAX_PAGE_SIZE {
            return Err(RegistryError::InvalidArgument(format!(
                "page_size must be in 1..={MAX_PAGE_SIZE}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchCacheEntry {
    pub nct_id: String,
    pub endpoint_version: String,
    pub retrieved_at: DateTime<Utc>,
    pub payload: String,
}

/// Token bucket; `rate` tokens per second with a burst of `max(1, rate)`.
#[derive(Debug)]
pub struct RateLimiter {
    rate: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    /// A rate of 0 disables limiting.
    pub fn new(rate: f64) -> Self {
        Self {
            rate,
            state: Mutex::new((rate.max(1.0), Instant::now())),
        }
    }

    pub fn acquire(&self) {
        if self.rate <= 0.0 {
            return;
        }
        let capacity = self.rate.max(1.0);
        loop {
            let wait = {
                let mut s = self.state.lock().expect("rate limiter lock");
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.rate).min(capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistryConfig {
    pub base_url: String,
    pub cache_dir: Option<PathBuf>,
    pub rate_limit: f64,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            cache_dir: None,
            rate_limit: 2.0,
            max_attempts: 4,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug)]
pub struct RegistryClient {
    config: RegistryConfig,
    http: HttpClient,
    limiter: RateLimiter,
}

const STUDY_FIELDS: &str = "NCTId,BriefTitle,EligibilityCriteria,OverallStatus,StartDate,StudyFirstPostDate,CompletionDate,PrimaryCompletionDate,LastUpdatePostDate";
const OPEN_STATUSES: &[&str] = &["RECRUITING", "NOT_YET_RECRUITING", "ENROLLING_BY_INVITATION"];

impl RegistryClient {
    pub fn new(config: RegistryConfig) -> Self {
        Self {
            http: HttpClient::new(config.timeout),
            limiter: RateLimiter::new(config.rate_limit),
            config,
        }
    }

    fn cache_path(&self, nct_id: &str) -> Option<PathBuf> {
        self.config
            .cache_dir
            .as_ref()
            .map(|d| d.join(ENDPOINT_VERSION).join(format!("{nct_id}.json")))
    }

    fn read_cache(&self, nct_id: &str) -> Result<Option<FetchCacheEntry>, RegistryError> {
        let Some(path) = self.cache_path(nct_id) else {
            return Ok(None);
        };
        match fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).map(Some).map_err(|e| cache_err(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(cache_err(&path, e)),
        }
    }

    fn write_cache(&self, entry: &FetchCacheEntry) -> Result<(), RegistryError> {
        let Some(path) = self.cache_path(&entry.nct_id) else {
            return Ok(());
        };
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| cache_err(dir, e))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let body = serde_json::to_vec(entry).map_err(|e| cache_err(&tmp, e))?;
        fs::write(&tmp, body).map_err(|e| cache_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| cache_err(&path, e))
    }

    /// GET with rate limiting and exponential backoff on transport errors, 429
    /// and 5xx. Returns `Ok(None)` on 404.
    fn get(&self, url: &str, query: &[(&str, &str)]) -> Result<Option<String>, RegistryError> {
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts.max(1) {
            if attempt > 0 {
                let delay = self.config.backoff_base * 2u32.saturating_pow(attempt - 1);
                debug!(url, attempt, ?delay, "retrying registry request");
                std::thread::sleep(delay);
            }
            self.limiter.acquire();
            match self.http.get(url, query) {
                Ok(r) if r.is_success() => return Ok(Some(r.body)),
                Ok(r) if r.status == 404 => return Ok(None),
                Ok(r) if r.status == 429 || r.status >= 500 => {
                    last = format!("HTTP {}", r.status);
                }
                Ok(r) => {
                    return Err(RegistryError::Payload(format!("HTTP {}: {}", r.status, r.body)));
                }
                Err(e) => last = e,
            }
            warn!(url, attempt, error = %last, "registry request failed");
        }
        Err(RegistryError::Transport {
            attempts: self.config.max_attempts.max(1),
            message: last,
        })
    }

    /// The study's record, from cache when present.
    pub fn fetch_trial(&self, nct_id: &str) -> Result<TrialRecord, RegistryError> {
        validate_nct_id(nct_id).map_err(|e| RegistryError::InvalidArgument(e.to_string()))?;
        if let Some(entry) = self.read_cache(nct_id)? {
            return parse_study(&entry.payload);
        }
        let url = format!("{}/studies/{nct_id}", self.config.base_url.trim_end_matches('/'));
        let payload = self
            .get(&url, &[("fields", STUDY_FIELDS), ("format", "json")])?
            .ok_or_else(|| RegistryError::NotFound(nct_id.to_string()))?;
        let record = parse_study(&payload)?;
        self.write_cache(&FetchCacheEntry {
            nct_id: nct_id.to_string(),
            endpoint_version: ENDPOINT_VERSION.to_string(),
            retrieved_at: Utc::now(),
            payload,
        })?;
        Ok(record)
    }

    /// All NCT ids matching the query, following page tokens. Order is registry
    /// order with repeats dropped.
    pub fn list_open_trials(&self, query: &RegistryQuery) -> Result<Vec<String>, RegistryError> {
        query.validate()?;
        let url = format!("{}/studies", self.config.base_url.trim_end_matches('/'));
        let page_size = query.page_size.to_string();
        let advanced = query
            .as_of
            .map(|d| format!("AREA[StartDate]RANGE[MIN,{}]", d.format("%Y-%m-%d")));
        let mut seen = HashSet::new();
        let mut ids = Vec::new();
        let mut token: Option<String> = None;
        loop {
            let mut params: Vec<(&str, &str)> = vec![
                ("query.cond", query.condition.as_str()),
                ("fields", "NCTId"),
                ("pageSize", page_size.as_str()),
                ("format", "json"),
            ];
            if query.status_filter == StatusFilter::RecruitingOnly {
                params.push(("filter.overallStatus", "RECRUITING"));
            }
            if let Some(a) = advanced.as_deref() {
                params.push(("filter.advanced", a));
            }
            if let Some(t) = token.as_deref() {
                params.push(("pageToken", t));
            }
            let body = self
                .get(&url, &params)?
                .ok_or_else(|| RegistryError::Payload("search endpoint returned 404".into()))?;
            let v: Value = serde_json::from_str(&body).map_err(|e| RegistryError::Payload(e.to_string()))?;
            let studies = v
                .get("studies")
                .and_then(Value::as_array)
                .ok_or_else(|| RegistryError::Payload("missing studies array".into()))?;
            for s in studies {
                let id = s
                    .pointer("/protocolSection/identificationModule/nctId")
                    .and_then(Value::as_str)
                    .ok_or_else(|| RegistryError::Payload("study without nctId".into()))?;
                if seen.insert(id.to_string()) {
                    ids.push(id.to_string());
                }
            }
            token = v.get("nextPageToken").and_then(Value::as_str).map(str::to_string);
            if token.is_none() {
                break;
            }
        }
        Ok(ids)
    }
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> RegistryError {
    RegistryError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Registry dates are `YYYY-MM-DD` or `YYYY-MM`; the latter maps to the first of the month.
pub fn parse_registry_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .or_else(|| NaiveDate::parse_from_str(&format!("{s}-01"), "%Y-%m-%d").ok())
}

fn date_at(v: &Value, module: &str, field: &str) -> Option<NaiveDate> {
    v.pointer(&format!("/protocolSection/{module}/{field}/date"))
        .and_then(Value::as_str)
        .and_then(parse_registry_date)
}

/// Maps a v2 study payload to a trial record.
///
/// The window opens at the start date (first-posted date when absent). Studies
/// still recruiting, not yet recruiting or enrolling by invitation stay open;
/// others close at the completion date, then primary completion, then last update.
pub fn parse_study(payload: &str) -> Result<TrialRecord, RegistryError> {
    let v: Value = serde_json::from_str(payload).map_err(|e| RegistryError::Payload(e.to_string()))?;
    let nct_id = v
        .pointer("/protocolSection/identificationModule/nctId")
        .and_then(Value::as_str)
        .ok_or_else(|| RegistryError::Payload("missing nctId".into()))?
        .to_string();
    let title = v
        .pointer("/protocolSection/identificationModule/briefTitle")
        .and_then(Value::as_str)
        .map(str::to_string);
    let eligibility_text = v
        .pointer("/protocolSection/eligibilityModule/eligibilityCriteria")
        .and_then(Value::as_str)
        .map(|t| t.replace("\r\n", "\n").replace('\r', "\n"))
        .unwrap_or_default();
    let status = v
        .pointer("/protocolSection/statusModule/overallStatus")
        .and_then(Value::as_str)
        .unwrap_or("");
    let open_date = date_at(&v, "statusModule", "startDateStruct")
        .or_else(|| date_at(&v, "statusModule", "studyFirstPostDateStruct"))
        .ok_or_else(|| RegistryError::Payload(format!("{nct_id} has no start or first-posted date")))?;
    let close_date = if OPEN_STATUSES.contains(&status) {
        None
    } else {
        date_at(&v, "statusModule", "completionDateStruct")
            .or_else(|| date_at(&v, "statusModule", "primaryCompletionDateStruct"))
            .or_else(|| date_at(&v, "statusModule", "lastUpdatePostDateStruct"))
            .map(|c| c.max(open_date))
    };
    Ok(TrialRecord {
        nct_id,
        title,
        eligibility_text,
        open_date,
        close_date,
    })
}

/// Uniform sample of `n` ids without replacement, sorted.
pub fn sample_trials(ids: &[String], n: usize, seed: u64) -> Result<Vec<String>, RegistryError> {
    if n > ids.len() {
        return Err(RegistryError::InvalidArgument(format!(
            "cannot sample {n} of {} ids",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = sample(&mut rng, ids.len(), n).into_iter().map(|i| ids[i].clone()).collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_dates() {
        assert_eq!(parse_registry_date("2021-03"), NaiveDate::from_ymd_opt(2021, 3, 1));
        assert_eq!(parse_registry_date("2021-03-09"), NaiveDate::from_ymd_opt(2021, 3, 9));
        assert_eq!(parse_registry_date("March 2021"), None);
    }

    #[test]
    fn study_payload_maps_to_record() {
        let p = r#"{"protocolSection":{"identificationModule":{"nctId":"NCT01234567","briefTitle":"T"},
            "eligibilityModule":{"eligibilityCriteria":"Inclusion:\r\n* adults"},
            "statusModule":{"overallStatus":"COMPLETED","startDateStruct":{"date":"2019-02"},
            "completionDateStruct":{"date":"2022-06-30"}}}}"#;
        let t = parse_study(p).unwrap();
        assert_eq!(t.eligibility_text, "Inclusion:\n* adults");
        assert_eq!(t.open_date, NaiveDate::from_ymd_opt(2019, 2, 1).unwrap());
        assert_eq!(t.close_date, NaiveDate::from_ymd_opt(2022, 6, 30));
    }

    #[test]
    fn sample_full_and_empty() {
        let ids: Vec<String> = ["b", "a", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(sample_trials(&ids, 3, 1).unwrap(), vec!["a", "b", "c"]);
        assert!(sample_trials(&ids, 0, 1).unwrap().is_empty());
        assert!(sample_trials(&ids, 4, 1).is_err());
    }
}
