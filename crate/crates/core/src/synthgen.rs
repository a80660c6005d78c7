//! Synthetic corpus generation: per-patient documents from the four generation
//! templates, condensed records, summaries, and optionally synthetic trials with
//! enrollments and training labels.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::cascade::{index_corpus, Matcher};
use crate::condenser::{condense, CondenseError, CondensedRecord, LexiconTagger};
use crate::datamodel::{
    save_corpus, write_jsonl, ClinicalDocument, Corpus, DataError, DocType, Enrollment, Patient,
    PatientSummary, SummarySource, TrialRecord,
};
use crate::embedding::Embedder;
use crate::lexicon::{self, CancerProfile, SCAN_TYPES};
use crate::llm::prompts::bindings;
use crate::llm::{LlmError, LlmGateway, TemplateId};
use crate::trainprep::{self, MiningRound, TrainPrepError};

pub const HISTORIES_FILE: &str = "histories.jsonl";
pub const CONDENSED_FILE: &str = "condensed.jsonl";
pub const CONDENSE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Condense(#[from] CondenseError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    TrainPrep(#[from] TrainPrepError),
    #[error("labeling failed: {0}")]
    Labeling(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CancerWeight {
    pub cancer_type: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub cancer_type_distribution: Vec<CancerWeight>,
    #[serde(default = "default_scan_pool")]
    pub scan_type_pool: Vec<String>,
    pub seed: u64,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
    /// Synthetic trials to generate; 0 leaves trials, spaces and enrollments empty.
    #[serde(default)]
    pub n_trials: usize,
    /// Probability that a patient is enrolled on an eligible synthetic trial.
    #[serde(default)]
    pub enroll_fraction: f64,
    /// Build stage-1 and mined training labels after assembly.
    #[serde(default)]
    pub with_labels: bool,
    #[serde(default = "default_neg_ratio")]
    pub neg_ratio: usize,
}

fn default_scan_pool() -> Vec<String> {
    SCAN_TYPES.iter().map(|s| s.to_string()).collect()
}

fn default_prefix() -> String {
    "SYN-".to_string()
}

fn default_neg_ratio() -> usize {
    1
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_patients > 0 && self.cancer_type_distribution.is_empty() {
            return Err(SynthError::InvalidSpec("cancer_type_distribution is empty".into()));
        }
        if let Some(w) = self
            .cancer_type_distribution
            .iter()
            .find(|w| !(w.weight > 0.0 && w.weight.is_finite()))
        {
            return Err(SynthError::InvalidSpec(format!(
                "weight for {} must be positive",
                w.cancer_type
            )));
        }
        if self.scan_type_pool.is_empty() {
            return Err(SynthError::InvalidSpec("scan_type_pool is empty".into()));
        }
        if self.id_prefix.is_empty() {
            return Err(SynthError::InvalidSpec("id_prefix must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.enroll_fraction) {
            return Err(SynthError::InvalidSpec("enroll_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn patient_id(&self, index: usize) -> String {
        format!("{}{:05}", self.id_prefix, index + 1)
    }
}

/// Cancer type per patient: counts by largest remainder over the weights, ties
/// to the earlier entry, then shuffled with the spec seed.
pub fn allocate_cancer_types(spec: &SynthSpec) -> Vec<String> {
    let total: f64 = spec.cancer_type_distribution.iter().map(|w| w.weight).sum();
    let n = spec.n_patients;
    let exact: Vec<f64> = spec
        .cancer_type_distribution
        .iter()
        .map(|w| w.weight / total * n as f64)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|a, b| (exact[*b] - exact[*b].floor()).total_cmp(&(exact[*a] - exact[*a].floor())).then(a.cmp(b)));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    let mut out: Vec<String> = spec
        .cancer_type_distribution
        .iter()
        .zip(&counts)
        .flat_map(|(w, c)| std::iter::repeat_n(w.cancer_type.clone(), *c))
        .collect();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    out
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn date_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(\d{1,2})/(\d{1,2})/(\d{4})\b").expect("valid regex"))
}

/// Every valid mm/dd/yyyy date in the text, in order of appearance.
pub fn parse_us_dates(text: &str) -> Vec<NaiveDate> {
    date_regex()
        .captures_iter(text)
        .filter_map(|c| {
            NaiveDate::from_ymd_opt(c[3].parse().ok()?, c[1].parse().ok()?, c[2].parse().ok()?)
        })
        .collect()
}

/// The generated chronological history, kept beside the three clinical documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthHistory {
    pub patient_id: String,
    pub cancer_type: String,
    pub date: NaiveDate,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPatient {
    pub patient_id: String,
    pub cancer_type: String,
    pub documents: Vec<ClinicalDocument>,
    pub history: SynthHistory,
}

fn generate_text(gateway: &LlmGateway, template: TemplateId, cancer_type: &str, scan_type: &str, seed: u64) -> Result<String, LlmError> {
    let b = if template == TemplateId::SynthImaging {
        bindings([("cancer_type", cancer_type), ("scan_type", scan_type)])
    } else {
        bindings([("cancer_type", cancer_type)])
    };
    match gateway.generate(template, &b, seed) {
        Ok(t) => Ok(t),
        Err(e) => {
            warn!(template = %template, error = %e, "generation failed, retrying once");
            gateway.generate(template, &b, seed)
        }
    }
}

/// Generates one hypothetical patient.
///
/// Dates come from the history: the pathology report takes the first history
/// date, and the imaging report and note take the first date in their own text
/// when it is not before that, else the middle and last history dates. Without
/// any history date the first date is derived from the seed.
pub fn generate_patient(
    gateway: &LlmGateway,
    patient_id: &str,
    cancer_type: &str,
    scan_type: &str,
    seed: u64,
) -> Result<SynthPatient, SynthError> {
    let history = generate_text(gateway, TemplateId::SynthHistory, cancer_type, scan_type, seed)?;
    let pathology = generate_text(gateway, TemplateId::SynthPathology, cancer_type, scan_type, seed)?;
    let imaging = generate_text(gateway, TemplateId::SynthImaging, cancer_type, scan_type, seed)?;
    let note = generate_text(gateway, TemplateId::SynthNote, cancer_type, scan_type, seed)?;

    let mut dates = parse_us_dates(&history);
    dates.sort_unstable();
    dates.dedup();
    if dates.is_empty() {
        let base = NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date");
        let first = base + Duration::days((seed % 2557) as i64);
        dates = vec![first, first + Duration::days(90), first + Duration::days(180)];
    }
    let first = dates[0];
    let own = |text: &str, fallback: NaiveDate| {
        parse_us_dates(text)
            .into_iter()
            .next()
            .filter(|d| *d >= first)
            .unwrap_or(fallback)
    };
    let doc = |doc_type, date, text: String| ClinicalDocument {
        patient_id: patient_id.to_string(),
        doc_type,
        date,
        text,
    };
    let last = *dates.last().expect("non-empty");
    let documents = vec![
        doc(DocType::PathologyReport, own(&pathology, first), pathology),
        doc(DocType::ImagingReport, own(&imaging, dates[dates.len() / 2]), imaging),
        doc(DocType::OncologistNote, own(&note, last), note),
    ];
    Ok(SynthPatient {
        patient_id: patient_id.to_string(),
        cancer_type: cancer_type.to_string(),
        documents,
        history: SynthHistory {
            patient_id: patient_id.to_string(),
            cancer_type: cancer_type.to_string(),
            date: last,
            text: history,
        },
    })
}

/// Synthetic trials over the given cancer types, round robin. Each has two
/// cohorts: a burden-and-biomarker cohort and a prior-therapy cohort, plus one
/// excluded prior therapy.
pub fn synth_trials(cancer_types: &[String], n: usize, seed: u64) -> Vec<TrialRecord> {
    if cancer_types.is_empty() {
        return Vec::new();
    }
    let mut rng = stream_rng(seed, u64::MAX);
    (0..n)
        .map(|i| {
            let name = &cancer_types[i % cancer_types.len()];
            let profile: Option<&CancerProfile> = lexicon::profile_by_name(name);
            let cancer = profile.map_or(name.as_str(), |p| p.name);
            let burden = lexicon::BURDENS[rng.gen_range(0..2)];
            let pick = |rng: &mut ChaCha8Rng, list: &[&'static str]| list.choose(rng).copied();
            let marker = profile.and_then(|p| pick(&mut rng, p.biomarkers));
            let mut treatments: Vec<&str> = profile
                .map(|p| p.treatments.choose_multiple(&mut rng, 2).copied().collect())
                .unwrap_or_default();
            treatments.resize(2, "investigational therapy");
            let histology = profile.and_then(|p| {
                if rng.gen_bool(0.5) {
                    pick(&mut rng, p.histologies)
                } else {
                    None
                }
            });
            let mut cohort1 = format!("Cohort 1: {burden} {cancer}");
            if let Some(h) = histology {
                cohort1.push_str(&format!(" ({h})"));
            }
            if let Some(m) = marker {
                cohort1.push_str(&format!(" with {m}"));
            }
            let eligibility_text = format!(
                "Inclusion Criteria:\nAge 18 years or older.\n{cohort1}.\nCohort 2: {cancer} after prior {}.\nAdequate organ function.\n\nExclusion Criteria:\nPrior {}.\nActive untreated brain metastases.",
                treatments[0], treatments[1]
            );
            let open = NaiveDate::from_ymd_opt(2014, 1, 1).expect("valid date") + Duration::days(rng.gen_range(0..730));
            let close = rng
                .gen_bool(0.25)
                .then(|| open + Duration::days(rng.gen_range(1825..2920)));
            TrialRecord {
                nct_id: format!("NCT9{:07}", i + 1),
                title: Some(format!("Phase 2 study of investigational therapy in {cancer}")),
                eligibility_text,
                open_date: open,
                close_date: close,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub histories: Vec<SynthHistory>,
    pub condensed: Vec<CondensedRecord>,
    pub failed_patients: usize,
    pub failed_trials: usize,
}

/// Generates the whole synthetic corpus described by `spec`.
pub fn assemble_corpus(spec: &SynthSpec, gateway: &LlmGateway) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let cancers = allocate_cancer_types(spec);
    let per_patient: Vec<Option<(SynthPatient, CondensedRecord, PatientSummary)>> = cancers
        .par_iter()
        .enumerate()
        .map(|(i, cancer)| {
            let mut rng = stream_rng(spec.seed, i as u64);
            let seed = rng.next_u64();
            let scan = spec.scan_type_pool[rng.gen_range(0..spec.scan_type_pool.len())].clone();
            let pid = spec.patient_id(i);
            let run = || -> Result<_, SynthError> {
                let patient = generate_patient(gateway, &pid, cancer, &scan, seed)?;
                let as_of = patient.documents.iter().map(|d| d.date).max().expect("three documents");
                let condensed = condense(&patient.documents, &LexiconTagger, CONDENSE_THRESHOLD, as_of)?;
                let summary = gateway.summarize_patient(&condensed, SummarySource::StandardOfCare)?;
                Ok((patient, condensed, summary))
            };
            match run() {
                Ok(v) => Some(v),
                Err(e) => {
                    warn!(patient = %pid, error = %e, "synthetic patient skipped");
                    None
                }
            }
        })
        .collect();

    let mut out = SynthOutput::default();
    for item in per_patient {
        let Some((patient, condensed, summary)) = item else {
            out.failed_patients += 1;
            continue;
        };
        out.corpus.patients.push(Patient {
            patient_id: patient.patient_id.clone(),
            cancer_type: Some(patient.cancer_type.clone()),
        });
        out.corpus.documents.extend(patient.documents);
        out.histories.push(patient.history);
        out.condensed.push(condensed);
        out.corpus.summaries.push(summary);
    }

    if spec.n_trials > 0 {
        let types: Vec<String> = spec.cancer_type_distribution.iter().map(|w| w.cancer_type.clone()).collect();
        let trials = synth_trials(&types, spec.n_trials, spec.seed);
        let extracted: Vec<_> = trials.par_iter().map(|t| gateway.extract_trial_spaces(t)).collect();
        for (trial, spaces) in trials.into_iter().zip(extracted) {
            match spaces {
                Ok(s) => {
                    out.corpus.spaces.extend(s);
                    out.corpus.trials.push(trial);
                }
                Err(e) => {
                    warn!(nct = %trial.nct_id, error = %e, "space extraction failed, trial skipped");
                    out.failed_trials += 1;
                }
            }
        }
        enroll(spec, gateway, &mut out.corpus, &out.histories)?;
    }
    out.corpus.canonicalize();
    info!(
        patients = out.corpus.patients.len(),
        trials = out.corpus.trials.len(),
        spaces = out.corpus.spaces.len(),
        enrollments = out.corpus.enrollments.len(),
        failed = out.failed_patients,
        "synthetic corpus assembled"
    );
    Ok(out)
}

/// Enrolls a seeded fraction of patients on the first open trial of their cancer
/// type with at least one space passing the reasonable-consideration check. The
/// enrolled patient's summary becomes a trial-enrollment summary.
fn enroll(spec: &SynthSpec, gateway: &LlmGateway, corpus: &mut Corpus, histories: &[SynthHistory]) -> Result<(), SynthError> {
    let cancer_of: BTreeMap<&str, &str> = histories
        .iter()
        .map(|h| (h.patient_id.as_str(), h.cancer_type.as_str()))
        .collect();
    let trial_cancer = |t: &TrialRecord| lexicon::detect_cancer(&t.eligibility_text).map(|p| p.name);
    let by_trial = corpus.spaces_by_trial();
    let mut rng = stream_rng(spec.seed, u64::MAX - 1);
    let mut enrollments = Vec::new();
    let mut enrolled = Vec::new();
    for (si, summary) in corpus.summaries.iter().enumerate() {
        if !rng.gen_bool(spec.enroll_fraction) {
            continue;
        }
        let want = cancer_of
            .get(summary.patient_id.as_str())
            .and_then(|c| lexicon::profile_by_name(c))
            .map(|p| p.name);
        for trial in &corpus.trials {
            if want.is_none() || trial_cancer(trial) != want || !trial.window().contains(summary.anchor_date) {
                continue;
            }
            let mut eligible = false;
            for space in by_trial.get(trial.nct_id.as_str()).into_iter().flatten() {
                match gateway.check_reasonable(summary, space) {
                    Ok(d) if d.value => {
                        eligible = true;
                        break;
                    }
                    Ok(_) | Err(LlmError::DecisionParse { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            if eligible {
                enrolled.push(si);
                enrollments.push(Enrollment {
                    patient_id: summary.patient_id.clone(),
                    nct_id: trial.nct_id.clone(),
                    enroll_date: summary.anchor_date,
                });
                break;
            }
        }
    }
    for si in enrolled {
        corpus.summaries[si].source = SummarySource::TrialEnrollment;
    }
    corpus.enrollments = enrollments;
    Ok(())
}

/// Adds stage-1 labels and one round of mined labels (top 10 spaces per train
/// summary, top 20 train summaries per space) using the given embedder.
pub fn add_training_labels(
    corpus: &mut Corpus,
    gateway: &LlmGateway,
    embedder: std::sync::Arc<Embedder>,
    neg_ratio: usize,
    seed: u64,
) -> Result<(), SynthError> {
    let stage1 = trainprep::build_stage1_pairs(
        &corpus.enrollments,
        &corpus.spaces,
        &corpus.summaries,
        gateway,
        neg_ratio,
        seed,
    )?;
    let index = index_corpus(corpus, &embedder).map_err(|e| SynthError::Labeling(e.to_string()))?;
    let matcher = Matcher::new(std::sync::Arc::new(index), embedder, corpus);
    let mined = trainprep::mine_hard_negatives(
        &matcher,
        &corpus.summaries,
        &corpus.spaces,
        gateway,
        10,
        20,
        MiningRound::Round1,
    )?;
    let mut labels = trainprep::pair_labels(&stage1, &[(MiningRound::Round1, &mined.pairs)])?;
    labels.sort_by(|a, b| (&a.summary_ref, &a.space_id, a.provenance).cmp(&(&b.summary_ref, &b.space_id, b.provenance)));
    labels.dedup_by(|a, b| a.summary_ref == b.summary_ref && a.space_id == b.space_id && a.provenance == b.provenance);
    corpus.labels = labels;
    Ok(())
}

/// Assembles the corpus and, when the spec asks for it, its training labels.
pub fn run_spec(
    spec: &SynthSpec,
    gateway: &LlmGateway,
    embedder: std::sync::Arc<Embedder>,
) -> Result<SynthOutput, SynthError> {
    let mut out = assemble_corpus(spec, gateway)?;
    if spec.with_labels {
        add_training_labels(&mut out.corpus, gateway, embedder, spec.neg_ratio, spec.seed)?;
        out.corpus.canonicalize();
    }
    Ok(out)
}

/// Writes the corpus files plus histories and condensed records.
pub fn write_output(output: &SynthOutput, dir: &Path) -> Result<(), SynthError> {
    save_corpus(&output.corpus, dir)?;
    let mut histories = output.histories.clone();
    histories.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    write_jsonl(&dir.join(HISTORIES_FILE), &histories)?;
    let mut condensed = output.condensed.clone();
    condensed.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    write_jsonl(&dir.join(CONDENSED_FILE), &condensed)?;
    Ok(())
}
