//! Domain types, patient-level split assignment and the line-delimited corpus format.
//!
//! A corpus directory holds one JSON-lines file per entity type:
//! `patients.jsonl`, `documents.jsonl`, `summaries.jsonl`, `trials.jsonl`,
//! `spaces.jsonl`, `enrollments.jsonl` and `labels.jsonl`. Missing files load as
//! empty collections. Records are written in canonical order (primary key, then
//! date) so that saved corpora diff cleanly.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::fnv1a64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("duplicate key {key} in {file}")]
    Conflict { file: String, key: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocType {
    OncologistNote,
    ImagingReport,
    PathologyReport,
}

impl DocType {
    pub fn as_str(self) -> &'static str {
        match self {
            DocType::OncologistNote => "oncologist_note",
            DocType::ImagingReport => "imaging_report",
            DocType::PathologyReport => "pathology_report",
        }
    }
}

impl fmt::Display for DocType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalDocument {
    pub patient_id: String,
    pub doc_type: DocType,
    pub date: NaiveDate,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummarySource {
    TrialEnrollment,
    StandardOfCare,
    UserEntered,
}

impl SummarySource {
    pub fn as_str(self) -> &'static str {
        match self {
            SummarySource::TrialEnrollment => "trial_enrollment",
            SummarySource::StandardOfCare => "standard_of_care",
            SummarySource::UserEntered => "user_entered",
        }
    }
}

impl FromStr for SummarySource {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trial_enrollment" => Ok(SummarySource::TrialEnrollment),
            "standard_of_care" => Ok(SummarySource::StandardOfCare),
            "user_entered" => Ok(SummarySource::UserEntered),
            other => Err(DataError::InvalidArgument(format!(
                "unknown summary source {other:?}"
            ))),
        }
    }
}

/// Identifies one patient summary: a patient at an anchor date from one source.
///
/// Renders as `<patient_id>@<YYYY-MM-DD>@<source>`, which is also its index item id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SummaryRef {
    pub patient_id: String,
    pub anchor_date: NaiveDate,
    pub source: SummarySource,
}

impl fmt::Display for SummaryRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@{}@{}",
            self.patient_id,
            self.anchor_date.format("%Y-%m-%d"),
            self.source.as_str()
        )
    }
}

impl FromStr for SummaryRef {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.rsplitn(3, '@');
        let (source, date, pid) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(d), Some(p)) if !p.is_empty() => (s, d, p),
            _ => {
                return Err(DataError::InvalidArgument(format!(
                    "malformed summary ref {s:?}"
                )))
            }
        };
        let anchor_date = NaiveDate::parse_from_str(date, "%Y-%m-%d")
            .map_err(|e| DataError::InvalidArgument(format!("bad date in {s:?}: {e}")))?;
        Ok(SummaryRef {
            patient_id: pid.to_string(),
            anchor_date,
            source: source.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub anchor_date: NaiveDate,
    pub source: SummarySource,
    pub text: String,
}

impl PatientSummary {
    pub fn summary_ref(&self) -> SummaryRef {
        SummaryRef {
            patient_id: self.patient_id.clone(),
            anchor_date: self.anchor_date,
            source: self.source,
        }
    }
}

/// A patient known to the corpus. `cancer_type` is an optional grouping label
/// used by diagnostics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancer_type: Option<String>,
}

fn nct_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^NCT[0-9]{8}$").expect("static regex"))
}

/// Checks the registry identifier pattern: `NCT` followed by exactly eight digits.
pub fn validate_nct_id(id: &str) -> Result<(), DataError> {
    if nct_regex().is_match(id) {
        Ok(())
    } else {
        Err(DataError::InvalidArgument(format!(
            "{id:?} is not an NCT id (NCT followed by 8 digits)"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub nct_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub eligibility_text: String,
    pub open_date: NaiveDate,
    /// `None` while the trial is still open.
    #[serde(default)]
    pub close_date: Option<NaiveDate>,
}

impl TrialRecord {
    pub fn window(&self) -> OpenWindow {
        OpenWindow {
            open_date: self.open_date,
            close_date: self.close_date,
        }
    }
}

/// Accrual window of a trial, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenWindow {
    pub open_date: NaiveDate,
    pub close_date: Option<NaiveDate>,
}

impl OpenWindow {
    pub fn contains(&self, date: NaiveDate) -> bool {
        self.open_date <= date && self.close_date.is_none_or(|c| date <= c)
    }
}

/// The seven criterion fields a trial space can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpaceField {
    CancerTypeAllowed,
    HistologyAllowed,
    CancerBurdenAllowed,
    PriorTreatmentRequired,
    PriorTreatmentExcluded,
    BiomarkersRequired,
    BiomarkersExcluded,
}

impl SpaceField {
    pub const ALL: [SpaceField; 7] = [
        SpaceField::CancerTypeAllowed,
        SpaceField::HistologyAllowed,
        SpaceField::CancerBurdenAllowed,
        SpaceField::PriorTreatmentRequired,
        SpaceField::PriorTreatmentExcluded,
        SpaceField::BiomarkersRequired,
        SpaceField::BiomarkersExcluded,
    ];

    /// Label as it appears in rendered space text, e.g. `Cancer type allowed`.
    pub fn label(self) -> &'static str {
        match self {
            SpaceField::CancerTypeAllowed => "Cancer type allowed",
            SpaceField::HistologyAllowed => "Histology allowed",
            SpaceField::CancerBurdenAllowed => "Cancer burden allowed",
            SpaceField::PriorTreatmentRequired => "Prior treatment required",
            SpaceField::PriorTreatmentExcluded => "Prior treatment excluded",
            SpaceField::BiomarkersRequired => "Biomarkers required",
            SpaceField::BiomarkersExcluded => "Biomarkers excluded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpace {
    pub space_id: String,
    pub nct_id: String,
    pub ordinal: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancer_type_allowed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histology_allowed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancer_burden_allowed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_treatment_required: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_treatment_excluded: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biomarkers_required: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biomarkers_excluded: Option<String>,
    pub raw_text: String,
}

impl TrialSpace {
    /// A space with no criterion fields set.
    pub fn new(nct_id: &str, ordinal: u32, raw_text: impl Into<String>) -> Self {
        TrialSpace {
            space_id: space_id(nct_id, ordinal),
            nct_id: nct_id.to_string(),
            ordinal,
            cancer_type_allowed: None,
            histology_allowed: None,
            cancer_burden_allowed: None,
            prior_treatment_required: None,
            prior_treatment_excluded: None,
            biomarkers_required: None,
            biomarkers_excluded: None,
            raw_text: raw_text.into(),
        }
    }

    pub fn field(&self, field: SpaceField) -> Option<&str> {
        match field {
            SpaceField::CancerTypeAllowed => self.cancer_type_allowed.as_deref(),
            SpaceField::HistologyAllowed => self.histology_allowed.as_deref(),
            SpaceField::CancerBurdenAllowed => self.cancer_burden_allowed.as_deref(),
            SpaceField::PriorTreatmentRequired => self.prior_treatment_required.as_deref(),
            SpaceField::PriorTreatmentExcluded => self.prior_treatment_excluded.as_deref(),
            SpaceField::BiomarkersRequired => self.biomarkers_required.as_deref(),
            SpaceField::BiomarkersExcluded => self.biomarkers_excluded.as_deref(),
        }
    }

    pub fn set_field(&mut self, field: SpaceField, value: Option<String>) {
        let slot = match field {
            SpaceField::CancerTypeAllowed => &mut self.cancer_type_allowed,
            SpaceField::HistologyAllowed => &mut self.histology_allowed,
            SpaceField::CancerBurdenAllowed => &mut self.cancer_burden_allowed,
            SpaceField::PriorTreatmentRequired => &mut self.prior_treatment_required,
            SpaceField::PriorTreatmentExcluded => &mut self.prior_treatment_excluded,
            SpaceField::BiomarkersRequired => &mut self.biomarkers_required,
            SpaceField::BiomarkersExcluded => &mut self.biomarkers_excluded,
        };
        *slot = value;
    }
}

pub fn space_id(nct_id: &str, ordinal: u32) -> String {
    format!("{nct_id}#{ordinal}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enrollment {
    pub patient_id: String,
    pub nct_id: String,
    pub enroll_date: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelProvenance {
    Stage1Enrolled,
    Stage1RandomNegative,
    MinedRound1,
    MinedRound2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLabel {
    pub summary_ref: SummaryRef,
    pub space_id: String,
    pub label: bool,
    pub provenance: LabelProvenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(DataError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Split bucket of a patient: FNV-1a 64 of the UTF-8 id, mod 100.
pub fn split_bucket(patient_id: &str) -> Result<u8, DataError> {
    if patient_id.is_empty() {
        return Err(DataError::InvalidArgument("empty patient id".into()));
    }
    Ok((fnv1a64(patient_id.as_bytes()) % 100) as u8)
}

/// Deterministic patient-level split. Buckets 0–79 train, 80–89 validation, 90–99 test.
pub fn assign_split(patient_id: &str) -> Result<Split, DataError> {
    Ok(match split_bucket(patient_id)? {
        0..=79 => Split::Train,
        80..=89 => Split::Validation,
        _ => Split::Test,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub patients: Vec<Patient>,
    pub documents: Vec<ClinicalDocument>,
    pub summaries: Vec<PatientSummary>,
    pub trials: Vec<TrialRecord>,
    pub spaces: Vec<TrialSpace>,
    pub enrollments: Vec<Enrollment>,
    pub labels: Vec<PairLabel>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Reject records carrying fields outside the documented schema.
    pub strict: bool,
}

pub const PATIENTS_FILE: &str = "patients.jsonl";
pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const SUMMARIES_FILE: &str = "summaries.jsonl";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const SPACES_FILE: &str = "spaces.jsonl";
pub const ENROLLMENTS_FILE: &str = "enrollments.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";

const PATIENT_FIELDS: &[&str] = &["patient_id", "cancer_type"];
const DOCUMENT_FIELDS: &[&str] = &["patient_id", "doc_type", "date", "text"];
const SUMMARY_FIELDS: &[&str] = &["patient_id", "anchor_date", "source", "text"];
const TRIAL_FIELDS: &[&str] = &["nct_id", "title", "eligibility_text", "open_date", "close_date"];
const SPACE_FIELDS: &[&str] = &[
    "space_id",
    "nct_id",
    "ordinal",
    "cancer_type_allowed",
    "histology_allowed",
    "cancer_burden_allowed",
    "prior_treatment_required",
    "prior_treatment_excluded",
    "biomarkers_required",
    "biomarkers_excluded",
    "raw_text",
];
const ENROLLMENT_FIELDS: &[&str] = &["patient_id", "nct_id", "enroll_date"];
const LABEL_FIELDS: &[&str] = &[
    "summary_ref",
    "space_id",
    "label",
    "provenance",
    "rationale_text",
];

/// Reads one JSON-lines file. Blank lines are skipped. In strict mode a record
/// with a field outside `known` is a parse error.
pub fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    known: Option<&[&str]>,
    opts: LoadOptions,
) -> Result<Vec<T>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DataError::Parse {
            file: name.clone(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let (true, Some(known), Some(obj)) = (opts.strict, known, value.as_object()) {
            if let Some(unknown) = obj.keys().find(|k| !known.contains(&k.as_str())) {
                return Err(parse_err(format!("unknown field {unknown:?}")));
            }
        }
        out.push(serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

/// Writes records one per line, `\n`-terminated.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| DataError::Invariant(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&buf).map_err(|e| DataError::io(path, e))
}

fn read_optional<T: DeserializeOwned>(
    dir: &Path,
    file: &str,
    known: &[&str],
    opts: LoadOptions,
) -> Result<Vec<T>, DataError> {
    let path = dir.join(file);
    if path.exists() {
        read_jsonl(&path, Some(known), opts)
    } else {
        Ok(Vec::new())
    }
}

fn check_unique<T, K: Ord + fmt::Debug>(
    file: &str,
    items: &[T],
    key: impl Fn(&T) -> K,
) -> Result<(), DataError> {
    let mut seen = BTreeSet::new();
    for item in items {
        let k = key(item);
        if seen.contains(&k) {
            return Err(DataError::Conflict {
                file: file.to_string(),
                key: format!("{k:?}"),
            });
        }
        seen.insert(k);
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, DataError> {
    load_corpus_with(dir, LoadOptions::default())
}

pub fn load_corpus_with(dir: &Path, opts: LoadOptions) -> Result<Corpus, DataError> {
    if !dir.is_dir() {
        return Err(DataError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let corpus = Corpus {
        patients: read_optional(dir, PATIENTS_FILE, PATIENT_FIELDS, opts)?,
        documents: read_optional(dir, DOCUMENTS_FILE, DOCUMENT_FIELDS, opts)?,
        summaries: read_optional(dir, SUMMARIES_FILE, SUMMARY_FIELDS, opts)?,
        trials: read_optional(dir, TRIALS_FILE, TRIAL_FIELDS, opts)?,
        spaces: read_optional(dir, SPACES_FILE, SPACE_FIELDS, opts)?,
        enrollments: read_optional(dir, ENROLLMENTS_FILE, ENROLLMENT_FIELDS, opts)?,
        labels: read_optional(dir, LABELS_FILE, LABEL_FIELDS, opts)?,
    };
    corpus.check_keys()?;
    Ok(corpus)
}

/// Writes every collection in canonical order. Files are always written, so an
/// empty corpus produces seven empty files.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    corpus.check_keys()?;
    let mut c = corpus.clone();
    c.canonicalize();
    write_jsonl(&dir.join(PATIENTS_FILE), &c.patients)?;
    write_jsonl(&dir.join(DOCUMENTS_FILE), &c.documents)?;
    write_jsonl(&dir.join(SUMMARIES_FILE), &c.summaries)?;
    write_jsonl(&dir.join(TRIALS_FILE), &c.trials)?;
    write_jsonl(&dir.join(SPACES_FILE), &c.spaces)?;
    write_jsonl(&dir.join(ENROLLMENTS_FILE), &c.enrollments)?;
    write_jsonl(&dir.join(LABELS_FILE), &c.labels)?;
    Ok(())
}

impl Corpus {
    /// Sorts every collection by primary key, then date. Documents of the same
    /// patient and date keep their input order.
    pub fn canonicalize(&mut self) {
        self.patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        self.documents
            .sort_by(|a, b| (&a.patient_id, a.date).cmp(&(&b.patient_id, b.date)));
        self.summaries.sort_by_key(|s| s.summary_ref());
        self.trials.sort_by(|a, b| a.nct_id.cmp(&b.nct_id));
        self.spaces
            .sort_by(|a, b| (&a.nct_id, a.ordinal).cmp(&(&b.nct_id, b.ordinal)));
        self.enrollments.sort_by(|a, b| {
            (&a.patient_id, &a.nct_id, a.enroll_date).cmp(&(&b.patient_id, &b.nct_id, b.enroll_date))
        });
        self.labels.sort_by(|a, b| {
            (&a.summary_ref, &a.space_id, a.provenance).cmp(&(&b.summary_ref, &b.space_id, b.provenance))
        });
    }

    fn check_keys(&self) -> Result<(), DataError> {
        check_unique(PATIENTS_FILE, &self.patients, |p| p.patient_id.clone())?;
        check_unique(SUMMARIES_FILE, &self.summaries, |s| s.summary_ref())?;
        check_unique(TRIALS_FILE, &self.trials, |t| t.nct_id.clone())?;
        check_unique(SPACES_FILE, &self.spaces, |s| s.space_id.clone())?;
        check_unique(ENROLLMENTS_FILE, &self.enrollments, |e| {
            (e.patient_id.clone(), e.nct_id.clone(), e.enroll_date)
        })?;
        check_unique(LABELS_FILE, &self.labels, |l| {
            (l.summary_ref.clone(), l.space_id.clone(), l.provenance)
        })?;
        Ok(())
    }

    /// Checks the record invariants and cross-references; returns every violation.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for d in &self.documents {
            if d.text.trim().is_empty() {
                problems.push(format!("document of {} on {} has empty text", d.patient_id, d.date));
            }
        }
        for s in &self.summaries {
            if s.text.trim().is_empty() {
                problems.push(format!("summary {} has empty text", s.summary_ref()));
            }
        }
        for t in &self.trials {
            if let Err(e) = validate_nct_id(&t.nct_id) {
                problems.push(e.to_string());
            }
            if let Some(close) = t.close_date {
                if close < t.open_date {
                    problems.push(format!("trial {} closes before it opens", t.nct_id));
                }
            }
        }
        let trial_ids: HashSet<&str> = self.trials.iter().map(|t| t.nct_id.as_str()).collect();
        for s in &self.spaces {
            if s.raw_text.trim().is_empty() {
                problems.push(format!("space {} has empty raw_text", s.space_id));
            }
            if s.ordinal == 0 {
                problems.push(format!("space {} has ordinal 0", s.space_id));
            }
            if s.space_id != space_id(&s.nct_id, s.ordinal) {
                problems.push(format!("space id {} does not match its trial/ordinal", s.space_id));
            }
            for f in SpaceField::ALL {
                if s.field(f).is_some_and(|v| v.is_empty()) {
                    problems.push(format!("space {} has an empty-string {:?}", s.space_id, f));
                }
            }
        }
        let patient_ids: HashSet<&str> = self
            .patients
            .iter()
            .map(|p| p.patient_id.as_str())
            .chain(self.summaries.iter().map(|s| s.patient_id.as_str()))
            .chain(self.documents.iter().map(|d| d.patient_id.as_str()))
            .collect();
        for e in &self.enrollments {
            if !patient_ids.contains(e.patient_id.as_str()) {
                problems.push(format!("enrollment references unknown patient {}", e.patient_id));
            }
            if !trial_ids.contains(e.nct_id.as_str()) {
                problems.push(format!("enrollment references unknown trial {}", e.nct_id));
            }
        }
        problems
    }

    pub fn trial(&self, nct_id: &str) -> Option<&TrialRecord> {
        self.trials.iter().find(|t| t.nct_id == nct_id)
    }

    pub fn space(&self, space_id: &str) -> Option<&TrialSpace> {
        self.spaces.iter().find(|s| s.space_id == space_id)
    }

    pub fn summary(&self, r: &SummaryRef) -> Option<&PatientSummary> {
        self.summaries.iter().find(|s| &s.summary_ref() == r)
    }

    /// Spaces grouped by trial, ordinal order preserved.
    pub fn spaces_by_trial(&self) -> BTreeMap<&str, Vec<&TrialSpace>> {
        let mut map: BTreeMap<&str, Vec<&TrialSpace>> = BTreeMap::new();
        for s in &self.spaces {
            map.entry(s.nct_id.as_str()).or_default().push(s);
        }
        for v in map.values_mut() {
            v.sort_by_key(|s| s.ordinal);
        }
        map
    }

    pub fn documents_of(&self, patient_id: &str) -> Vec<&ClinicalDocument> {
        self.documents.iter().filter(|d| d.patient_id == patient_id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn split_is_deterministic() {
        let a = assign_split("patient_00042").unwrap();
        for _ in 0..1000 {
            assert_eq!(assign_split("patient_00042").unwrap(), a);
        }
    }

    #[test]
    fn empty_patient_id_rejected() {
        assert!(matches!(assign_split(""), Err(DataError::InvalidArgument(_))));
    }

    #[test]
    fn nct_pattern() {
        assert!(validate_nct_id("NCT04644237").is_ok());
        assert!(validate_nct_id("NCT0000000").is_err());
        assert!(validate_nct_id("NCT000000001").is_err());
        assert!(validate_nct_id("nct04644237").is_err());
    }

    #[test]
    fn summary_ref_round_trip() {
        let r = SummaryRef {
            patient_id: "p@odd".into(),
            anchor_date: d("2020-02-29"),
            source: SummarySource::StandardOfCare,
        };
        let s = r.to_string();
        assert_eq!(s, "p@odd@2020-02-29@standard_of_care");
        assert_eq!(s.parse::<SummaryRef>().unwrap(), r);
    }

    #[test]
    fn window_bounds_inclusive() {
        let w = OpenWindow {
            open_date: d("2020-01-01"),
            close_date: Some(d("2020-12-31")),
        };
        assert!(w.contains(d("2020-01-01")));
        assert!(w.contains(d("2020-12-31")));
        assert!(!w.contains(d("2021-01-01")));
        assert!(!w.contains(d("2019-12-31")));
    }

    #[test]
    fn validate_flags_bad_records() {
        let mut c = Corpus::default();
        c.trials.push(TrialRecord {
            nct_id: "NCT123".into(),
            title: None,
            eligibility_text: "x".into(),
            open_date: d("2020-01-01"),
            close_date: Some(d("2019-01-01")),
        });
        c.enrollments.push(Enrollment {
            patient_id: "ghost".into(),
            nct_id: "NCT123".into(),
            enroll_date: d("2020-02-01"),
        });
        let problems = c.validate();
        assert_eq!(problems.len(), 3, "{problems:?}");
    }
}
