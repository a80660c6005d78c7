//! Training-set assembly: tagger sentences, stage-1 embedding pairs, mined pairs
//! and the checker dataset, with split leakage checks on everything emitted.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::cascade::{MatchError, MatchOptions, Matcher};
use crate::condenser::segment_at;
use crate::datamodel::{
    assign_split, ClinicalDocument, Enrollment, LabelProvenance, PairLabel, PatientSummary, Split,
    SummaryRef, TrialSpace,
};
use crate::index::QueryFilter;
use crate::llm::{LlmError, LlmGateway};

pub const SCHEMA_VERSION: u32 = 1;
pub const TAGGER_FILE: &str = "tagger.jsonl";
pub const RANKING_FILE: &str = "embed_ranking.jsonl";
pub const CONTRASTIVE_FILE: &str = "embed_contrastive.jsonl";
pub const CHECKER_FILE: &str = "checker.jsonl";

#[derive(Debug, Error)]
pub enum TrainPrepError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("split leakage: patient {patient_id} is in the {split} split")]
    Leakage { patient_id: String, split: Split },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

fn split_of(patient_id: &str) -> Result<Split, TrainPrepError> {
    assign_split(patient_id).map_err(|e| TrainPrepError::InvalidArgument(e.to_string()))
}

fn require_split(patient_id: &str, allowed: &[Split]) -> Result<(), TrainPrepError> {
    let split = split_of(patient_id)?;
    if allowed.contains(&split) {
        Ok(())
    } else {
        Err(TrainPrepError::Leakage {
            patient_id: patient_id.to_string(),
            split,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggerExample {
    pub patient_id: String,
    /// Train or validation; the tagger reuses the global patient split.
    pub subset: Split,
    pub sentence: String,
    /// Concept labels in `lexicon::CONCEPTS` order.
    pub labels: [bool; 6],
    pub any_tag: bool,
}

impl TaggerExample {
    pub fn new(patient_id: &str, subset: Split, sentence: &str, labels: [bool; 6]) -> Self {
        Self {
            patient_id: patient_id.to_string(),
            subset,
            sentence: sentence.to_string(),
            labels,
            any_tag: labels.iter().any(|l| *l),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaggerDataset {
    pub examples: Vec<TaggerExample>,
    pub skipped_unparseable: usize,
}

/// Samples sentences from train and validation patients and labels them with the
/// LLM tagger. The sample is drawn without replacement from all sentences in
/// (patient, date, document, sentence) order, so a seed fixes the dataset.
pub fn build_tagger_dataset(
    documents: &[ClinicalDocument],
    gateway: &LlmGateway,
    sample_size: usize,
    seed: u64,
) -> Result<TaggerDataset, TrainPrepError> {
    let mut docs: Vec<(usize, &ClinicalDocument)> = documents.iter().enumerate().collect();
    docs.sort_by(|a, b| {
        (&a.1.patient_id, a.1.date, a.0).cmp(&(&b.1.patient_id, b.1.date, b.0))
    });
    let mut pool = Vec::new();
    for (i, doc) in docs {
        let split = split_of(&doc.patient_id)?;
        if split == Split::Test {
            continue;
        }
        for s in segment_at(doc, i) {
            pool.push((split, s));
        }
    }
    if sample_size == 0 || pool.is_empty() {
        return Ok(TaggerDataset::default());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, pool.len(), sample_size.min(pool.len())).into_vec();
    picked.sort_unstable();

    let results: Vec<Result<Option<TaggerExample>, TrainPrepError>> = picked
        .par_iter()
        .map(|&i| {
            let (split, s) = &pool[i];
            match gateway.tag_sentence(&s.text) {
                Ok(flags) => Ok(Some(TaggerExample::new(&s.patient_id, *split, &s.text, flags))),
                Err(LlmError::TagParse { raw }) => {
                    warn!(patient = %s.patient_id, raw = %raw, "unparseable tag output, sentence skipped");
                    Ok(None)
                }
                Err(e) => Err(e.into()),
            }
        })
        .collect();
    let mut out = TaggerDataset::default();
    for r in results {
        match r? {
            Some(e) => out.examples.push(e),
            None => out.skipped_unparseable += 1,
        }
    }
    info!(examples = out.examples.len(), skipped = out.skipped_unparseable, "tagger dataset built");
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRelation {
    PositiveChecked,
    RandomNegative,
    MinedLabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStage {
    Stage1,
    Refine,
}

/// Which mining pass produced a pair: round 1 uses the preliminary embedding
/// model, round 2 the final one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningRound {
    Round1,
    Round2,
}

impl MiningRound {
    pub fn provenance(self) -> LabelProvenance {
        match self {
            MiningRound::Round1 => LabelProvenance::MinedRound1,
            MiningRound::Round2 => LabelProvenance::MinedRound2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedPairExample {
    pub patient_id: String,
    pub summary_ref: String,
    pub space_id: String,
    pub anchor_text: String,
    pub candidate_text: String,
    pub relation: PairRelation,
    pub label: bool,
    pub stage: PairStage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<MiningRound>,
}

/// An LLM-checked (summary, space) pair with either outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckedPair {
    pub patient_id: String,
    pub summary_ref: String,
    pub space_id: String,
    pub summary_text: String,
    pub space_text: String,
    pub label: bool,
}

impl CheckedPair {
    fn new(summary: &PatientSummary, space: &TrialSpace, label: bool) -> Self {
        Self {
            patient_id: summary.patient_id.clone(),
            summary_ref: summary.summary_ref().to_string(),
            space_id: space.space_id.clone(),
            summary_text: summary.text.clone(),
            space_text: space.raw_text.clone(),
            label,
        }
    }
}

impl From<&EmbedPairExample> for CheckedPair {
    fn from(e: &EmbedPairExample) -> Self {
        Self {
            patient_id: e.patient_id.clone(),
            summary_ref: e.summary_ref.clone(),
            space_id: e.space_id.clone(),
            summary_text: e.anchor_text.clone(),
            space_text: e.candidate_text.clone(),
            label: e.label,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stage1Output {
    /// Checked positives followed by random negatives.
    pub pairs: Vec<EmbedPairExample>,
    /// Every enrolled pair the LLM judged, pass or fail; checker dataset (a).
    pub enrolled_checked: Vec<CheckedPair>,
    pub skipped_missing_summary: usize,
    pub skipped_unparseable: usize,
}

fn check_pairs(
    gateway: &LlmGateway,
    pairs: &[(&PatientSummary, &TrialSpace)],
) -> Result<(Vec<Option<bool>>, usize), TrainPrepError> {
    let results: Vec<Result<Option<bool>, TrainPrepError>> = pairs
        .par_iter()
        .map(|(summary, space)| match gateway.check_reasonable(summary, space) {
            Ok(d) => Ok(Some(d.value)),
            Err(LlmError::DecisionParse { .. }) => {
                warn!(summary = %summary.summary_ref(), space = %space.space_id, "unparseable check, pair skipped");
                Ok(None)
            }
            Err(e) => Err(e.into()),
        })
        .collect();
    let labels = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let skipped = labels.iter().filter(|l| l.is_none()).count();
    Ok((labels, skipped))
}

/// Stage-1 embedding pairs from train-split enrollments.
///
/// Each enrollment is linked to the summary anchored on its enrollment date and
/// to every space of the enrolled trial. Pairs passing the reasonable-consideration
/// check become positives. Then `neg_ratio` times as many negatives are drawn
/// uniformly without replacement: an anchor from the positives' summaries and a
/// space from a trial the patient never enrolled on.
pub fn build_stage1_pairs(
    enrollments: &[Enrollment],
    spaces: &[TrialSpace],
    summaries: &[PatientSummary],
    gateway: &LlmGateway,
    neg_ratio: usize,
    seed: u64,
) -> Result<Stage1Output, TrainPrepError> {
    let mut out = Stage1Output::default();
    let by_key: HashMap<(&str, chrono::NaiveDate), &PatientSummary> = summaries
        .iter()
        .map(|s| ((s.patient_id.as_str(), s.anchor_date), s))
        .collect();
    let mut by_trial: BTreeMap<&str, Vec<&TrialSpace>> = BTreeMap::new();
    for s in spaces {
        by_trial.entry(s.nct_id.as_str()).or_default().push(s);
    }
    for list in by_trial.values_mut() {
        list.sort_by_key(|s| s.ordinal);
    }
    let mut enrolled_ncts: HashMap<&str, HashSet<&str>> = HashMap::new();
    for e in enrollments {
        enrolled_ncts.entry(e.patient_id.as_str()).or_default().insert(e.nct_id.as_str());
    }

    let mut sorted: Vec<&Enrollment> = enrollments.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.patient_id, a.enroll_date, &a.nct_id).cmp(&(&b.patient_id, b.enroll_date, &b.nct_id))
    });
    let mut work = Vec::new();
    for e in sorted {
        if split_of(&e.patient_id)? != Split::Train {
            continue;
        }
        let Some(summary) = by_key.get(&(e.patient_id.as_str(), e.enroll_date)) else {
            warn!(patient = %e.patient_id, nct = %e.nct_id, "no summary at enrollment date, skipped");
            out.skipped_missing_summary += 1;
            continue;
        };
        for space in by_trial.get(e.nct_id.as_str()).map(Vec::as_slice).unwrap_or_default() {
            work.push((*summary, *space));
        }
    }
    let mut seen = HashSet::new();
    work.retain(|(s, p)| seen.insert((s.summary_ref(), p.space_id.clone())));

    let (labels, skipped) = check_pairs(gateway, &work)?;
    out.skipped_unparseable = skipped;
    let mut anchors: Vec<&PatientSummary> = Vec::new();
    let mut positive_keys = HashSet::new();
    for ((summary, space), label) in work.iter().zip(&labels) {
        let Some(label) = *label else { continue };
        out.enrolled_checked.push(CheckedPair::new(summary, space, label));
        if label {
            out.pairs.push(EmbedPairExample {
                patient_id: summary.patient_id.clone(),
                summary_ref: summary.summary_ref().to_string(),
                space_id: space.space_id.clone(),
                anchor_text: summary.text.clone(),
                candidate_text: space.raw_text.clone(),
                relation: PairRelation::PositiveChecked,
                label: true,
                stage: PairStage::Stage1,
                round: None,
            });
            positive_keys.insert((summary.summary_ref(), space.space_id.clone()));
            if anchors.last().map(|a| a.summary_ref()) != Some(summary.summary_ref()) {
                anchors.push(summary);
            }
        }
    }
    anchors.sort_by_key(|a| a.summary_ref());
    anchors.dedup_by_key(|a| a.summary_ref());

    let wanted = neg_ratio * positive_keys.len();
    let mut space_pool: Vec<&TrialSpace> = spaces.iter().collect();
    space_pool.sort_by(|a, b| a.space_id.cmp(&b.space_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn = HashSet::new();
    let mut negatives = Vec::new();
    let max_attempts = wanted.saturating_mul(50).max(1000);
    let mut attempts = 0;
    while negatives.len() < wanted && attempts < max_attempts && !space_pool.is_empty() {
        attempts += 1;
        let anchor = anchors[rng.gen_range(0..anchors.len())];
        let space = space_pool[rng.gen_range(0..space_pool.len())];
        let excluded = enrolled_ncts
            .get(anchor.patient_id.as_str())
            .is_some_and(|n| n.contains(space.nct_id.as_str()));
        if excluded || !drawn.insert((anchor.summary_ref(), space.space_id.clone())) {
            continue;
        }
        negatives.push(EmbedPairExample {
            patient_id: anchor.patient_id.clone(),
            summary_ref: anchor.summary_ref().to_string(),
            space_id: space.space_id.clone(),
            anchor_text: anchor.text.clone(),
            candidate_text: space.raw_text.clone(),
            relation: PairRelation::RandomNegative,
            label: false,
            stage: PairStage::Stage1,
            round: None,
        });
    }
    if negatives.len() < wanted {
        warn!(wanted, drawn = negatives.len(), "fewer eligible random negatives than requested");
    }
    out.pairs.extend(negatives);
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MinedOutput {
    pub pairs: Vec<EmbedPairExample>,
    pub skipped_unparseable: usize,
}

/// Labels the top-`k_patient` spaces of every train-split summary and the
/// top-`k_space` train-split summaries of every space. Patient-side queries keep
/// only trials open on the summary's anchor date and space-side queries only
/// summaries anchored inside the trial's window. A pair found from both sides is
/// labeled once.
pub fn mine_hard_negatives(
    matcher: &Matcher,
    summaries: &[PatientSummary],
    spaces: &[TrialSpace],
    gateway: &LlmGateway,
    k_patient: usize,
    k_space: usize,
    round: MiningRound,
) -> Result<MinedOutput, TrainPrepError> {
    if k_patient == 0 || k_space == 0 {
        return Err(TrainPrepError::InvalidArgument("k must be at least 1".into()));
    }
    let retrieval = matcher.clone().with_checker(None);
    let mut queries: Vec<&PatientSummary> = Vec::new();
    for s in summaries {
        if split_of(&s.patient_id)? == Split::Train {
            queries.push(s);
        }
    }
    queries.sort_by_key(|s| s.summary_ref());
    let mut space_queries: Vec<&TrialSpace> = spaces.iter().collect();
    space_queries.sort_by(|a, b| a.space_id.cmp(&b.space_id));

    let summary_by_ref: HashMap<String, &PatientSummary> =
        summaries.iter().map(|s| (s.summary_ref().to_string(), s)).collect();
    let space_by_id: HashMap<&str, &TrialSpace> = spaces.iter().map(|s| (s.space_id.as_str(), s)).collect();

    let patient_opts = MatchOptions {
        k: k_patient,
        threshold: 0.0,
        temporal: true,
        filter: QueryFilter::default(),
    };
    let space_opts = MatchOptions {
        k: k_space,
        threshold: 0.0,
        temporal: true,
        filter: QueryFilter {
            split_in: Some(BTreeSet::from([Split::Train])),
            ..QueryFilter::default()
        },
    };
    let from_patients: Vec<Vec<(String, String)>> = queries
        .par_iter()
        .map(|s| {
            Ok(retrieval
                .match_patient(s, &patient_opts)?
                .into_iter()
                .map(|c| (c.query_ref, c.item_ref))
                .collect())
        })
        .collect::<Result<_, MatchError>>()?;
    let from_spaces: Vec<Vec<(String, String)>> = space_queries
        .par_iter()
        .map(|p| {
            Ok(retrieval
                .match_space(p, &space_opts)?
                .into_iter()
                .map(|c| (c.item_ref, c.query_ref))
                .collect())
        })
        .collect::<Result<_, MatchError>>()?;

    let mut seen = HashSet::new();
    let mut work = Vec::new();
    for (summary_ref, space_id) in from_patients.into_iter().chain(from_spaces).flatten() {
        if !seen.insert((summary_ref.clone(), space_id.clone())) {
            continue;
        }
        // Index entries without corpus text cannot be labeled.
        if let (Some(s), Some(p)) = (summary_by_ref.get(&summary_ref), space_by_id.get(space_id.as_str())) {
            work.push((*s, *p));
        }
    }
    let (labels, skipped) = check_pairs(gateway, &work)?;
    let pairs = work
        .iter()
        .zip(labels)
        .filter_map(|((s, p), label)| {
            Some(EmbedPairExample {
                patient_id: s.patient_id.clone(),
                summary_ref: s.summary_ref().to_string(),
                space_id: p.space_id.clone(),
                anchor_text: s.text.clone(),
                candidate_text: p.raw_text.clone(),
                relation: PairRelation::MinedLabeled,
                label: label?,
                stage: PairStage::Refine,
                round: Some(round),
            })
        })
        .collect();
    Ok(MinedOutput {
        pairs,
        skipped_unparseable: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckerProvenance {
    AEnrolled,
    BMinedPrelim,
    CMinedFinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckerExample {
    pub patient_id: String,
    pub summary_ref: String,
    pub space_id: String,
    pub summary_text: String,
    pub space_text: String,
    pub label: bool,
    pub provenance: CheckerProvenance,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckerDataset {
    pub examples: Vec<CheckerExample>,
    pub duplicates_dropped: usize,
    pub conflicts_resolved: usize,
}

/// Union of the three checker sources.
///
/// Exact repeats of (summary text, space text, label) keep the earliest
/// provenance. When the same texts carry different labels, the latest provenance
/// wins and the conflict is logged. Examples keep the position of their first
/// occurrence. Any non-train patient is a hard error.
pub fn build_checker_dataset(
    enrolled: &[CheckedPair],
    mined_b: &[CheckedPair],
    mined_c: &[CheckedPair],
) -> Result<CheckerDataset, TrainPrepError> {
    let mut out = CheckerDataset::default();
    let mut slot: HashMap<(String, String), usize> = HashMap::new();
    let sources = [
        (CheckerProvenance::AEnrolled, enrolled),
        (CheckerProvenance::BMinedPrelim, mined_b),
        (CheckerProvenance::CMinedFinal, mined_c),
    ];
    for (provenance, pairs) in sources {
        for p in pairs {
            require_split(&p.patient_id, &[Split::Train])?;
            let example = CheckerExample {
                patient_id: p.patient_id.clone(),
                summary_ref: p.summary_ref.clone(),
                space_id: p.space_id.clone(),
                summary_text: p.summary_text.clone(),
                space_text: p.space_text.clone(),
                label: p.label,
                provenance,
            };
            let key = (p.summary_text.clone(), p.space_text.clone());
            match slot.get(&key) {
                None => {
                    slot.insert(key, out.examples.len());
                    out.examples.push(example);
                }
                Some(&i) if out.examples[i].label == p.label => out.duplicates_dropped += 1,
                Some(&i) => {
                    warn!(
                        summary = %p.summary_ref,
                        space = %p.space_id,
                        kept = ?provenance,
                        replaced = ?out.examples[i].provenance,
                        "conflicting checker labels, later provenance kept"
                    );
                    out.examples[i] = example;
                    out.conflicts_resolved += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Gold labels for the corpus from checked enrolled pairs, random negatives and
/// mined pairs.
pub fn pair_labels(
    stage1: &Stage1Output,
    mined: &[(MiningRound, &[EmbedPairExample])],
) -> Result<Vec<PairLabel>, TrainPrepError> {
    let parse = |s: &str| -> Result<SummaryRef, TrainPrepError> {
        s.parse().map_err(|e: crate::datamodel::DataError| TrainPrepError::InvalidArgument(e.to_string()))
    };
    let mut out = Vec::new();
    for c in &stage1.enrolled_checked {
        out.push(PairLabel {
            summary_ref: parse(&c.summary_ref)?,
            space_id: c.space_id.clone(),
            label: c.label,
            provenance: LabelProvenance::Stage1Enrolled,
            rationale_text: None,
        });
    }
    for p in stage1.pairs.iter().filter(|p| p.relation == PairRelation::RandomNegative) {
        out.push(PairLabel {
            summary_ref: parse(&p.summary_ref)?,
            space_id: p.space_id.clone(),
            label: false,
            provenance: LabelProvenance::Stage1RandomNegative,
            rationale_text: None,
        });
    }
    for (round, pairs) in mined {
        for p in *pairs {
            out.push(PairLabel {
                summary_ref: parse(&p.summary_ref)?,
                space_id: p.space_id.clone(),
                label: p.label,
                provenance: round.provenance(),
                rationale_text: None,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a T,
}

#[derive(Serialize)]
struct RankingRow<'a> {
    patient_id: &'a str,
    summary_ref: &'a str,
    space_id: &'a str,
    anchor: &'a str,
    positive: &'a str,
    stage: PairStage,
    #[serde(skip_serializing_if = "Option::is_none")]
    round: Option<MiningRound>,
}

#[derive(Serialize)]
struct ContrastiveRow<'a> {
    patient_id: &'a str,
    summary_ref: &'a str,
    space_id: &'a str,
    anchor: &'a str,
    candidate: &'a str,
    label: bool,
    relation: PairRelation,
    stage: PairStage,
    #[serde(skip_serializing_if = "Option::is_none")]
    round: Option<MiningRound>,
}

#[derive(Serialize)]
struct CheckerRow<'a> {
    patient_id: &'a str,
    summary_ref: &'a str,
    space_id: &'a str,
    summary: &'a str,
    space: &'a str,
    label: bool,
    provenance: CheckerProvenance,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<usize, TrainPrepError> {
    let io = |e: std::io::Error| TrainPrepError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let mut n = 0;
    for row in rows {
        let line = serde_json::to_string(&Versioned {
            schema_version: SCHEMA_VERSION,
            record: &row,
        })
        .map_err(|e| io(e.into()))?;
        f.write_all(line.as_bytes()).map_err(io)?;
        f.write_all(b"\n").map_err(io)?;
        n += 1;
    }
    f.flush().map_err(io)?;
    Ok(n)
}

pub fn write_tagger_file(path: &Path, examples: &[TaggerExample]) -> Result<usize, TrainPrepError> {
    for e in examples {
        require_split(&e.patient_id, &[Split::Train, Split::Validation])?;
    }
    write_rows(path, examples)
}

/// Positive pairs only, for the in-batch ranking objective.
pub fn write_ranking_file(path: &Path, pairs: &[EmbedPairExample]) -> Result<usize, TrainPrepError> {
    for p in pairs {
        require_split(&p.patient_id, &[Split::Train])?;
    }
    write_rows(
        path,
        pairs.iter().filter(|p| p.label).map(|p| RankingRow {
            patient_id: &p.patient_id,
            summary_ref: &p.summary_ref,
            space_id: &p.space_id,
            anchor: &p.anchor_text,
            positive: &p.candidate_text,
            stage: p.stage,
            round: p.round,
        }),
    )
}

/// Every labeled pair, for the contrastive objective.
pub fn write_contrastive_file(path: &Path, pairs: &[EmbedPairExample]) -> Result<usize, TrainPrepError> {
    for p in pairs {
        require_split(&p.patient_id, &[Split::Train])?;
    }
    write_rows(
        path,
        pairs.iter().map(|p| ContrastiveRow {
            patient_id: &p.patient_id,
            summary_ref: &p.summary_ref,
            space_id: &p.space_id,
            anchor: &p.anchor_text,
            candidate: &p.candidate_text,
            label: p.label,
            relation: p.relation,
            stage: p.stage,
            round: p.round,
        }),
    )
}

pub fn write_checker_file(path: &Path, examples: &[CheckerExample]) -> Result<usize, TrainPrepError> {
    for e in examples {
        require_split(&e.patient_id, &[Split::Train])?;
    }
    write_rows(
        path,
        examples.iter().map(|e| CheckerRow {
            patient_id: &e.patient_id,
            summary_ref: &e.summary_ref,
            space_id: &e.space_id,
            summary: &e.summary_text,
            space: &e.space_text,
            label: e.label,
            provenance: e.provenance,
        }),
    )
}

/// Reads an emitted file and checks every record's `patient_id` against the
/// allowed splits. Returns the number of records scanned.
pub fn scan_leakage(path: &Path, allowed: &[Split]) -> Result<usize, TrainPrepError> {
    let io = |message: String| TrainPrepError::Io {
        path: path.display().to_string(),
        message,
    };
    let f = std::fs::File::open(path).map_err(|e| io(e.to_string()))?;
    let mut n = 0;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| io(format!("line {}: {e}", i + 1)))?;
        let pid = v
            .get("patient_id")
            .and_then(|p| p.as_str())
            .ok_or_else(|| io(format!("line {}: missing patient_id", i + 1)))?;
        require_split(pid, allowed)?;
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid_in(split: Split, skip: usize) -> String {
        (0..)
            .map(|i| format!("P{i:05}"))
            .filter(|p| assign_split(p).unwrap() == split)
            .nth(skip)
            .unwrap()
    }

    fn pair(pid: &str, s: &str, p: &str, label: bool) -> CheckedPair {
        CheckedPair {
            patient_id: pid.into(),
            summary_ref: format!("{pid}@2020-01-01@trial_enrollment"),
            space_id: p.into(),
            summary_text: s.into(),
            space_text: p.into(),
            label,
        }
    }

    #[test]
    fn dedup_keeps_earliest_on_agreement_and_latest_on_conflict() {
        let pid = pid_in(Split::Train, 0);
        let a = [pair(&pid, "s1", "x", true), pair(&pid, "s2", "y", true)];
        let b = [pair(&pid, "s1", "x", true), pair(&pid, "s2", "y", false)];
        let d = build_checker_dataset(&a, &b, &[]).unwrap();
        assert_eq!(d.examples.len(), 2);
        assert_eq!(d.examples[0].provenance, CheckerProvenance::AEnrolled);
        assert_eq!(d.examples[1].provenance, CheckerProvenance::BMinedPrelim);
        assert!(!d.examples[1].label);
        assert_eq!((d.duplicates_dropped, d.conflicts_resolved), (1, 1));
    }

    #[test]
    fn test_split_patient_is_rejected() {
        let bad = pid_in(Split::Test, 0);
        let err = build_checker_dataset(&[], &[pair(&bad, "s", "x", true)], &[]).unwrap_err();
        assert!(matches!(err, TrainPrepError::Leakage { .. }));
    }
}
