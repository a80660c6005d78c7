//! Record condensing: split documents into sentences, score each sentence for the
//! six target concepts, and keep the sentences whose any-tag score reaches a
//! threshold, in chronological order.

use std::sync::OnceLock;
use std::time::Duration;

use chrono::NaiveDate;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::ClinicalDocument;
use crate::http::HttpClient;
use crate::lexicon;

#[derive(Debug, Error)]
pub enum CondenseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tagger failed on batch {batch_index}: {message}")]
    Tagger { batch_index: usize, message: String },
    #[error("tagger contract violation: {0}")]
    Contract(String),
    #[error("no sentences retained for patient {patient_id} as of {as_of}")]
    EmptyRecord { patient_id: String, as_of: NaiveDate },
}

/// Position of a sentence: which input document and where inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SentenceRef {
    pub doc_date: NaiveDate,
    pub doc_index: usize,
    pub seq: usize,
    /// Byte offsets into the document text.
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub patient_id: String,
    pub doc_index: usize,
    pub doc_date: NaiveDate,
    pub seq: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

impl Sentence {
    pub fn sentence_ref(&self) -> SentenceRef {
        SentenceRef {
            doc_date: self.doc_date,
            doc_index: self.doc_index,
            seq: self.seq,
            char_start: self.char_start,
            char_end: self.char_end,
        }
    }
}

const ABBREVIATIONS: &[&str] = &[
    "dr", "pt", "pts", "vs", "mr", "mrs", "ms", "e.g", "i.e", "approx", "no", "st", "jr", "fig",
];

fn stage_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?i)[cpyr]?[tnm][0-4x](?:[a-d]|is)?$").expect("static regex"))
}

/// True when the period ending `token` marks an abbreviation or stage token
/// rather than a sentence end.
fn is_protected(token: &str) -> bool {
    let t = token.trim_start_matches(['(', '[', '"', '\'']);
    let lower = t.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str()) || stage_token().is_match(t)
}

/// Sentence spans of `text` as byte ranges, trimmed of surrounding whitespace.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    let push = |s: usize, e: usize, spans: &mut Vec<(usize, usize)>| {
        let piece = &text[s..e];
        let lead = piece.len() - piece.trim_start().len();
        let trail = piece.len() - piece.trim_end().len();
        if lead + trail < piece.len() {
            spans.push((s + lead, e - trail));
        }
    };
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        let next = iter.peek().map(|(_, n)| *n);
        let end = match c {
            '\n' => Some(i),
            '.' | '!' | '?' if next.is_none_or(char::is_whitespace) => {
                let token_start = text[start..i]
                    .rfind(char::is_whitespace)
                    .map_or(start, |p| start + p + 1);
                if c == '.' && is_protected(&text[token_start..i]) {
                    None
                } else {
                    Some(i + 1)
                }
            }
            _ => None,
        };
        if let Some(e) = end {
            push(start, e, &mut spans);
            start = if c == '\n' { i + 1 } else { e };
        }
    }
    push(start, text.len(), &mut spans);
    spans
}

/// Splits one document into sentences, tagging them with document index 0.
pub fn segment(document: &ClinicalDocument) -> Vec<Sentence> {
    segment_at(document, 0)
}

pub fn segment_at(document: &ClinicalDocument, doc_index: usize) -> Vec<Sentence> {
    sentence_spans(&document.text)
        .into_iter()
        .enumerate()
        .map(|(seq, (s, e))| Sentence {
            patient_id: document.patient_id.clone(),
            doc_index,
            doc_date: document.date,
            seq,
            char_start: s,
            char_end: e,
            text: document.text[s..e].to_string(),
        })
        .collect()
}

/// Per-concept relevance scores in [`lexicon::CONCEPTS`] order plus the any-tag score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagScores {
    pub concepts: [f64; 6],
    pub any_tag: f64,
}

impl TagScores {
    pub fn from_slice(values: &[f64]) -> Option<Self> {
        if values.len() != 7 {
            return None;
        }
        let mut concepts = [0.0; 6];
        concepts.copy_from_slice(&values[..6]);
        Some(Self { concepts, any_tag: values[6] })
    }

    fn in_range(&self) -> bool {
        self.concepts
            .iter()
            .chain(std::iter::once(&self.any_tag))
            .all(|v| (0.0..=1.0).contains(v))
    }
}

pub trait SentenceTagger: Send + Sync {
    fn id(&self) -> &str;
    /// Scores a batch, one result per input in order.
    fn score_batch(&self, sentences: &[&str]) -> Result<Vec<TagScores>, String>;
}

/// Keyword tagger: a concept scores 1.0 when any of its keywords occurs as a
/// whole term, else 0.0; any-tag is the maximum.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexiconTagger;

impl LexiconTagger {
    pub fn score(sentence: &str) -> TagScores {
        let lower = sentence.to_lowercase();
        let mut concepts = [0.0; 6];
        for (i, c) in concepts.iter_mut().enumerate() {
            if lexicon::concept_keywords(i).iter().any(|k| lexicon::contains_term(&lower, k)) {
                *c = 1.0;
            }
        }
        let any_tag = concepts.iter().copied().fold(0.0, f64::max);
        TagScores { concepts, any_tag }
    }
}

impl SentenceTagger for LexiconTagger {
    fn id(&self) -> &str {
        "lexicon"
    }

    fn score_batch(&self, sentences: &[&str]) -> Result<Vec<TagScores>, String> {
        Ok(sentences.iter().map(|s| Self::score(s)).collect())
    }
}

/// Tagger behind the scoring-service contract:
/// `POST {url}` with `{"sentences": [..]}` answering `{"scores": [[7 floats], ..]}`.
#[derive(Debug, Clone)]
pub struct RemoteTagger {
    url: String,
    token: Option<String>,
    http: HttpClient,
}

#[derive(Deserialize)]
struct ScoresBody {
    scores: Vec<Vec<f64>>,
}

impl RemoteTagger {
    pub fn new(url: impl Into<String>, token: Option<String>) -> Self {
        Self {
            url: url.into(),
            token,
            http: HttpClient::new(Duration::from_secs(120)),
        }
    }
}

impl SentenceTagger for RemoteTagger {
    fn id(&self) -> &str {
        &self.url
    }

    fn score_batch(&self, sentences: &[&str]) -> Result<Vec<TagScores>, String> {
        let resp = self
            .http
            .post_json(&self.url, &serde_json::json!({ "sentences": sentences }), self.token.as_deref())?;
        if !resp.is_success() {
            return Err(format!("HTTP {}: {}", resp.status, resp.body));
        }
        let body: ScoresBody = serde_json::from_str(&resp.body).map_err(|e| e.to_string())?;
        body.scores
            .iter()
            .map(|row| TagScores::from_slice(row).ok_or_else(|| format!("expected 7 scores, got {}", row.len())))
            .collect()
    }
}

pub const DEFAULT_BATCH: usize = 64;

/// Scores sentences in batches, fanning batches out in parallel and merging in order.
pub fn tag(
    sentences: &[Sentence],
    tagger: &dyn SentenceTagger,
    batch_size: usize,
) -> Result<Vec<TagScores>, CondenseError> {
    let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
    tag_texts(&texts, tagger, batch_size)
}

pub fn tag_texts(
    texts: &[&str],
    tagger: &dyn SentenceTagger,
    batch_size: usize,
) -> Result<Vec<TagScores>, CondenseError> {
    let batch_size = batch_size.max(1);
    let results: Vec<Result<Vec<TagScores>, CondenseError>> = texts
        .par_chunks(batch_size)
        .enumerate()
        .map(|(batch_index, chunk)| {
            let scores = tagger
                .score_batch(chunk)
                .map_err(|message| CondenseError::Tagger { batch_index, message })?;
            if scores.len() != chunk.len() {
                return Err(CondenseError::Contract(format!(
                    "batch {batch_index}: {} scores for {} sentences",
                    scores.len(),
                    chunk.len()
                )));
            }
            if let Some(bad) = scores.iter().find(|s| !s.in_range()) {
                return Err(CondenseError::Contract(format!(
                    "batch {batch_index}: score outside [0, 1]: {bad:?}"
                )));
            }
            Ok(scores)
        })
        .collect();
    let mut out = Vec::with_capacity(texts.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Picks the observed score that maximizes F1 of `score >= threshold` against
/// `labels`. Among equal F1 values the lowest threshold wins.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<f64, CondenseError> {
    if scores.len() != labels.len() {
        return Err(CondenseError::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CondenseError::InvalidArgument("NaN score".into()));
    }
    let positives = labels.iter().filter(|l| **l).count() as u128;
    if positives == 0 || positives == labels.len() as u128 {
        return Err(CondenseError::InvalidArgument(
            "labels must contain both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));

    // F1 = 2tp / (predicted + positives); compared exactly as fractions.
    let mut best: Option<(f64, u128, u128)> = None;
    let (mut tp, mut predicted) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            predicted += 1;
            tp += u128::from(labels[order[i]]);
            i += 1;
        }
        let (num, den) = (2 * tp, predicted + positives);
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd >= bn * den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    Ok(best.expect("non-empty input").0)
}

/// Condensed record of one patient as of a cutoff date.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondensedRecord {
    pub patient_id: String,
    pub as_of_date: NaiveDate,
    pub text: String,
    pub retained_refs: Vec<SentenceRef>,
}

/// Keeps the sentences with any-tag score at or above `threshold` from documents
/// dated on or before `as_of`.
///
/// Sections appear in (date, input position) order, each headed by a
/// `[YYYY-MM-DD doc_type]` line and followed by its retained sentences, one per line.
pub fn condense(
    documents: &[ClinicalDocument],
    tagger: &dyn SentenceTagger,
    threshold: f64,
    as_of: NaiveDate,
) -> Result<CondensedRecord, CondenseError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CondenseError::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let Some(first) = documents.first() else {
        return Err(CondenseError::InvalidArgument("no documents".into()));
    };
    let patient_id = first.patient_id.clone();
    if let Some(other) = documents.iter().find(|d| d.patient_id != patient_id) {
        return Err(CondenseError::InvalidArgument(format!(
            "documents of several patients: {patient_id} and {}",
            other.patient_id
        )));
    }
    let mut eligible: Vec<(usize, &ClinicalDocument)> = documents
        .iter()
        .enumerate()
        .filter(|(_, d)| d.date <= as_of)
        .collect();
    eligible.sort_by_key(|(i, d)| (d.date, *i));

    let sentences: Vec<Sentence> = eligible
        .iter()
        .flat_map(|(i, d)| segment_at(d, *i))
        .collect();
    let scores = tag(&sentences, tagger, DEFAULT_BATCH)?;

    let mut lines = Vec::new();
    let mut retained_refs = Vec::new();
    let mut current_doc = None;
    for (sentence, score) in sentences.iter().zip(&scores) {
        if score.any_tag < threshold {
            continue;
        }
        if current_doc != Some(sentence.doc_index) {
            let doc = &documents[sentence.doc_index];
            lines.push(format!("[{} {}]", doc.date, doc.doc_type.as_str()));
            current_doc = Some(sentence.doc_index);
        }
        lines.push(sentence.text.clone());
        retained_refs.push(sentence.sentence_ref());
    }
    if retained_refs.is_empty() {
        return Err(CondenseError::EmptyRecord { patient_id, as_of });
    }
    Ok(CondensedRecord {
        patient_id,
        as_of_date: as_of,
        text: lines.join("\n"),
        retained_refs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::DocType;

    fn doc(text: &str) -> ClinicalDocument {
        ClinicalDocument {
            patient_id: "p".into(),
            doc_type: DocType::OncologistNote,
            date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            text: text.into(),
        }
    }

    fn texts(t: &str) -> Vec<String> {
        segment(&doc(t)).into_iter().map(|s| s.text).collect()
    }

    #[test]
    fn basic_split() {
        assert_eq!(texts("Stage IV NSCLC. On osimertinib."), vec!["Stage IV NSCLC.", "On osimertinib."]);
    }

    #[test]
    fn decimal_guard() {
        assert_eq!(texts("CEA 4.2 ng/mL rising."), vec!["CEA 4.2 ng/mL rising."]);
    }

    #[test]
    fn abbreviations_and_stage_tokens() {
        assert_eq!(texts("Seen by Dr. Lee today. Tumor is pT2a. N0 by imaging."), vec![
            "Seen by Dr. Lee today.",
            "Tumor is pT2a. N0 by imaging."
        ]);
        assert_eq!(texts("Line one\nLine two"), vec!["Line one", "Line two"]);
    }

    #[test]
    fn threshold_examples() {
        let t = select_threshold(&[0.1, 0.4, 0.6, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(t, 0.6);
        assert!(select_threshold(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn lexicon_scores() {
        assert_eq!(LexiconTagger::score("Biopsy showed adenocarcinoma.").concepts[1], 1.0);
        let none = LexiconTagger::score("The weather was discussed.");
        assert_eq!(none.concepts, [0.0; 6]);
        assert_eq!(none.any_tag, 0.0);
    }
}
