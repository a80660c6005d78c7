//! Retrieval and classifier metrics, embedding diagnostics, and the two
//! evaluation protocols with their table-shaped reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::cascade::{result_count_stats, MatchCandidate, MatchError, MatchOptions, Matcher};
use crate::datamodel::{assign_split, Corpus, LabelProvenance, Split, SummaryRef};
use crate::embedding::dot;
use crate::llm::{LlmError, LlmGateway};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("gold label lookup failed: {0}")]
    Gold(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Relevance of one query's returned candidates, in rank order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedJudgments {
    pub query_id: String,
    pub relevance: Vec<bool>,
}

fn truncated(j: &RankedJudgments, k: usize) -> &[bool] {
    &j.relevance[..j.relevance.len().min(k)]
}

/// Fraction of a non-empty list that is relevant.
pub fn precision(list: &[bool]) -> Option<f64> {
    if list.is_empty() {
        return None;
    }
    Some(list.iter().filter(|r| **r).count() as f64 / list.len() as f64)
}

/// Average precision: mean of precision@i over relevant positions i, normalized by
/// the number of relevant items returned. 0 when nothing relevant is returned.
pub fn average_precision(list: &[bool]) -> Option<f64> {
    if list.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, rel) in list.iter().enumerate() {
        if *rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

fn macro_mean(
    judgments: &[RankedJudgments],
    k: usize,
    per_query: fn(&[bool]) -> Option<f64>,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidArgument("k must be at least 1".into()));
    }
    let values: Vec<f64> = judgments
        .iter()
        .filter_map(|j| per_query(truncated(j, k)))
        .collect();
    if values.is_empty() {
        return Err(EvalError::UndefinedMetric("every query returned zero results".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Macro-averaged precision over queries with at least one returned result.
pub fn precision_at_k(judgments: &[RankedJudgments], k: usize) -> Result<f64, EvalError> {
    macro_mean(judgments, k, precision)
}

/// Mean of per-query average precision over queries with at least one result.
pub fn map_at_k(judgments: &[RankedJudgments], k: usize) -> Result<f64, EvalError> {
    macro_mean(judgments, k, average_precision)
}

/// Number of queries with no returned result.
pub fn empty_queries(judgments: &[RankedJudgments]) -> usize {
    judgments.iter().filter(|j| j.relevance.is_empty()).count()
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::InvalidArgument("NaN score".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    Ok((pos, labels.len() - pos))
}

/// Groups of tied scores in descending score order, as (positives, negatives).
fn tie_groups_desc(scores: &[f64], labels: &[bool]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in order {
        let s = scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if labels[i] { g.1 += 1 } else { g.2 += 1 }
            }
            _ => groups.push((s, u64::from(labels[i]), u64::from(!labels[i]))),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties counting
/// one half, computed exactly over all pairs.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (pos, neg) = check_scores(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(EvalError::UndefinedMetric("AUROC needs both classes".into()));
    }
    // Ascending pass; twice the U statistic stays an integer.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for (_, p, n) in tie_groups_desc(scores, labels).into_iter().rev() {
        twice_u += u128::from(p) * (2 * neg_below + u128::from(n));
        neg_below += u128::from(n);
    }
    Ok(twice_u as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Area under the precision-recall curve by step integration of the precision
/// envelope: with operating points at each distinct score (descending),
/// `sum_i (R_i - R_{i-1}) * max_{j >= i} P_j`, starting from recall 0.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (pos, neg) = check_scores(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(EvalError::UndefinedMetric("AUPRC needs both classes".into()));
    }
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (_, p, n) in tie_groups_desc(scores, labels) {
        tp += p;
        fp += n;
        points.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut envelope = 0.0f64;
    let mut area = 0.0;
    let mut prev_recall_of = vec![0.0; points.len()];
    for i in 0..points.len() {
        prev_recall_of[i] = if i == 0 { 0.0 } else { points[i - 1].0 };
    }
    for i in (0..points.len()).rev() {
        envelope = envelope.max(points[i].1);
        area += (points[i].0 - prev_recall_of[i]) * envelope;
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin_mid: f64,
    pub mean_score: f64,
    pub frac_positive: f64,
    pub count: usize,
}

/// Equal-width bins over [0, 1]; a score of exactly 1 falls in the last bin.
/// Empty bins are omitted.
pub fn calibration_curve(scores: &[f64], labels: &[bool], bins: usize) -> Result<Vec<CalibrationBin>, EvalError> {
    check_scores(scores, labels)?;
    if bins == 0 || scores.is_empty() {
        return Err(EvalError::InvalidArgument("need at least one bin and one score".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::InvalidArgument(format!("score {s} outside [0, 1]")));
    }
    let mut acc = vec![(0.0f64, 0usize, 0usize); bins];
    for (s, l) in scores.iter().zip(labels) {
        let b = ((s * bins as f64) as usize).min(bins - 1);
        acc[b].0 += s;
        acc[b].1 += 1;
        acc[b].2 += usize::from(*l);
    }
    Ok(acc
        .iter()
        .enumerate()
        .filter(|(_, a)| a.1 > 0)
        .map(|(b, (sum, n, p))| CalibrationBin {
            bin_mid: (b as f64 + 0.5) / bins as f64,
            mean_score: sum / *n as f64,
            frac_positive: *p as f64 / *n as f64,
            count: *n,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    /// Biased squared MMD.
    pub mmd: f64,
    pub p_value: f64,
    pub bandwidth: f64,
    pub permutations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Biased squared MMD of a pooled kernel matrix split by `in_x`.
fn mmd_of_split(kernel: &[f64], n: usize, total: f64, members: &[usize], nx: usize) -> f64 {
    let (xs, ys) = members.split_at(nx);
    let block = |idx: &[usize]| -> f64 {
        idx.iter()
            .map(|&i| {
                let row = &kernel[i * n..(i + 1) * n];
                idx.iter().map(|&j| row[j]).sum::<f64>()
            })
            .sum()
    };
    let sxx = block(xs);
    let syy = block(ys);
    let sxy = (total - sxx - syy) / 2.0;
    let (fx, fy) = (nx as f64, (n - nx) as f64);
    sxx / (fx * fx) + syy / (fy * fy) - 2.0 * sxy / (fx * fy)
}

/// Kernel two-sample test.
///
/// Gaussian kernel `exp(-|a-b|^2 / (2 sigma^2))` with sigma the median pairwise
/// distance of the pooled sample (1 when that median is 0). The statistic is the
/// biased (V-statistic) squared MMD; the p-value is
/// `(1 + #{permuted >= observed}) / (1 + permutations)`. Permutation `i` shuffles
/// with ChaCha8 seeded by `seed` on stream `i`, so results do not depend on
/// thread count.
pub fn mmd_test(x: &[Vec<f64>], y: &[Vec<f64>], permutations: usize, seed: u64) -> Result<MmdResult, EvalError> {
    if x.len() < 2 || y.len() < 2 {
        return Err(EvalError::InvalidArgument("each sample needs at least two points".into()));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != dim) {
        return Err(EvalError::InvalidArgument("points differ in dimension".into()));
    }
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
    let n = pooled.len();
    let mut d2 = vec![0.0; n * n];
    let mut distances = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(pooled[i], pooled[j]);
            d2[i * n + j] = d;
            d2[j * n + i] = d;
            distances.push(d.sqrt());
        }
    }
    let mut sigma = median(&mut distances);
    if sigma == 0.0 || !sigma.is_finite() {
        sigma = 1.0;
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let kernel: Vec<f64> = d2.iter().map(|d| (-d * gamma).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let identity: Vec<usize> = (0..n).collect();
    let observed = mmd_of_split(&kernel, n, total, &identity, x.len());

    let exceed = (0..permutations)
        .into_par_iter()
        .filter(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut members = identity.clone();
            members.shuffle(&mut rng);
            mmd_of_split(&kernel, n, total, &members, x.len()) >= observed
        })
        .count();
    Ok(MmdResult {
        mmd: observed.max(0.0),
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        bandwidth: sigma,
        permutations,
    })
}

/// Indices (ascending) of points kept by the per-group kNN distance rule.
///
/// For each point, the mean Euclidean distance to its `k` nearest neighbors in
/// the same group (all other members when the group is smaller) is compared with
/// the group's mean of that quantity plus `z` population standard deviations;
/// points above the cut are dropped. Groups with at most `k` members are kept whole.
pub fn knn_outlier_filter(points: &[[f64; 2]], groups: &[String], k: usize, z: f64) -> Result<Vec<usize>, EvalError> {
    if points.len() != groups.len() {
        return Err(EvalError::InvalidArgument("points and groups differ in length".into()));
    }
    if k == 0 {
        return Err(EvalError::InvalidArgument("k must be at least 1".into()));
    }
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g.as_str()).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (group, members) in by_group {
        if members.len() <= k {
            info!(group, size = members.len(), "group too small for outlier filtering, kept whole");
            keep.extend(members);
            continue;
        }
        let dist = |a: usize, b: usize| {
            let (p, q) = (points[a], points[b]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        };
        let means: Vec<f64> = members
            .iter()
            .map(|&i| {
                let mut d: Vec<f64> = members.iter().filter(|&&j| j != i).map(|&j| dist(i, j)).collect();
                d.sort_by(f64::total_cmp);
                let m = k.min(d.len());
                d[..m].iter().sum::<f64>() / m as f64
            })
            .collect();
        let mu = means.iter().sum::<f64>() / means.len() as f64;
        let sd = (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
        // Relative slack so rounding noise in a uniform cluster drops nothing.
        let cut = mu + z * sd + 1e-9 * mu.abs().max(1e-12);
        keep.extend(members.iter().zip(&means).filter(|(_, m)| **m <= cut).map(|(i, _)| *i));
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Mean pairwise cosine over same-label pairs and over cross-label pairs.
pub fn cosine_cohesion(vectors: &[Vec<f32>], labels: &[String]) -> Result<(f64, f64), EvalError> {
    if vectors.len() != labels.len() {
        return Err(EvalError::InvalidArgument("vectors and labels differ in length".into()));
    }
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in (i + 1)..vectors.len() {
            let c = dot(&vectors[i], &vectors[j]);
            if labels[i] == labels[j] {
                within += c;
                nw += 1;
            } else {
                between += c;
                nb += 1;
            }
        }
    }
    if nw == 0 || nb == 0 {
        return Err(EvalError::UndefinedMetric(
            "need at least one same-label pair and one cross-label pair".into(),
        ));
    }
    Ok((within / nw as f64, between / nb as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    PatientCentricK10,
    TrialCentricK20,
}

impl Protocol {
    pub fn k(self) -> usize {
        match self {
            Protocol::PatientCentricK10 => 10,
            Protocol::TrialCentricK20 => 20,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::PatientCentricK10 => "patient_centric_k10",
            Protocol::TrialCentricK20 => "trial_centric_k20",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "patient_centric" | "patient_centric_k10" => Ok(Protocol::PatientCentricK10),
            "trial_centric" | "trial_centric_k20" => Ok(Protocol::TrialCentricK20),
            other => Err(EvalError::InvalidArgument(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    RetrievalOnly,
    RetrievalPlusChecker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub variant: Variant,
    pub k: usize,
    /// `None` when every query returned zero results.
    pub precision_at_k: Option<f64>,
    pub map_at_k: Option<f64>,
    pub median_results: usize,
    pub mean_results: f64,
    pub n_queries: usize,
    pub n_empty_queries: usize,
}

/// Source of gold reasonable-consideration labels.
pub trait GoldSource: Sync {
    fn label(&self, summary: &SummaryRef, space_id: &str) -> Result<Option<bool>, EvalError>;
}

/// Gold labels stored in the corpus. When a pair is labeled in several rounds,
/// the latest round wins.
#[derive(Debug, Clone, Default)]
pub struct CorpusGold {
    labels: HashMap<(SummaryRef, String), (LabelProvenance, bool)>,
}

impl CorpusGold {
    pub fn new(corpus: &Corpus) -> Self {
        let mut labels: HashMap<(SummaryRef, String), (LabelProvenance, bool)> = HashMap::new();
        for l in &corpus.labels {
            let key = (l.summary_ref.clone(), l.space_id.clone());
            match labels.get(&key) {
                Some((prov, _)) if *prov >= l.provenance => {}
                _ => {
                    labels.insert(key, (l.provenance, l.label));
                }
            }
        }
        Self { labels }
    }
}

impl GoldSource for CorpusGold {
    fn label(&self, summary: &SummaryRef, space_id: &str) -> Result<Option<bool>, EvalError> {
        Ok(self
            .labels
            .get(&(summary.clone(), space_id.to_string()))
            .map(|(_, l)| *l))
    }
}

/// Corpus labels first, then a live reasonable-consideration check for pairs
/// the corpus does not cover.
pub struct LlmGold<'a> {
    stored: CorpusGold,
    gateway: &'a LlmGateway,
    summaries: HashMap<SummaryRef, &'a str>,
    spaces: HashMap<&'a str, &'a str>,
}

impl<'a> LlmGold<'a> {
    pub fn new(corpus: &'a Corpus, gateway: &'a LlmGateway) -> Self {
        Self {
            stored: CorpusGold::new(corpus),
            gateway,
            summaries: corpus
                .summaries
                .iter()
                .map(|s| (s.summary_ref(), s.text.as_str()))
                .collect(),
            spaces: corpus
                .spaces
                .iter()
                .map(|s| (s.space_id.as_str(), s.raw_text.as_str()))
                .collect(),
        }
    }
}

impl GoldSource for LlmGold<'_> {
    fn label(&self, summary: &SummaryRef, space_id: &str) -> Result<Option<bool>, EvalError> {
        if let Some(l) = self.stored.label(summary, space_id)? {
            return Ok(Some(l));
        }
        let (Some(s), Some(p)) = (self.summaries.get(summary), self.spaces.get(space_id)) else {
            return Ok(None);
        };
        match self.gateway.check_texts(s, p) {
            Ok(d) => Ok(Some(d.value)),
            Err(LlmError::DecisionParse { .. }) => {
                warn!(%summary, space_id, "gold check unparseable");
                Ok(None)
            }
            Err(e) => Err(EvalError::Gold(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingGold {
    pub query_ref: String,
    pub item_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub retrieval_only: EvalReport,
    pub retrieval_plus_checker: EvalReport,
    /// Pairs without gold; their queries are excluded from both reports.
    pub missing_gold: Vec<MissingGold>,
    pub excluded_queries: usize,
}

fn report(protocol: Protocol, variant: Variant, judgments: &[RankedJudgments]) -> EvalReport {
    let k = protocol.k();
    let counts: Vec<usize> = judgments.iter().map(|j| j.relevance.len().min(k)).collect();
    let (median_results, mean_results) = result_count_stats(&counts).unwrap_or((0, 0.0));
    EvalReport {
        protocol,
        variant,
        k,
        precision_at_k: precision_at_k(judgments, k).ok(),
        map_at_k: map_at_k(judgments, k).ok(),
        median_results,
        mean_results,
        n_queries: judgments.len(),
        n_empty_queries: empty_queries(judgments),
    }
}

fn summary_split(r: &SummaryRef) -> Option<Split> {
    assign_split(&r.patient_id).ok()
}

/// Query id, (gold label, passed) per judged candidate, and pairs without gold.
type JudgedQuery = (String, Vec<(bool, bool)>, Vec<MissingGold>);

/// Runs one protocol and reports retrieval alone and retrieval plus checker.
///
/// Patient-centric queries are the test-split summaries; trial-centric queries
/// are all spaces, ranked against summaries of every split. Queries are processed
/// in parallel and reported in sorted query order.
pub fn run_protocol(
    corpus: &Corpus,
    matcher: &Matcher,
    protocol: Protocol,
    threshold: f64,
    gold: &dyn GoldSource,
) -> Result<ProtocolOutcome, EvalError> {
    let opts = MatchOptions {
        k: protocol.k(),
        threshold,
        ..MatchOptions::patient_default()
    };
    let per_query: Vec<Result<(String, Vec<MatchCandidate>), EvalError>> = match protocol {
        Protocol::PatientCentricK10 => {
            let mut queries: Vec<_> = corpus
                .summaries
                .iter()
                .filter(|s| summary_split(&s.summary_ref()) == Some(Split::Test))
                .collect();
            queries.sort_by_key(|s| s.summary_ref());
            queries
                .par_iter()
                .map(|s| Ok((s.summary_ref().to_string(), matcher.match_patient(s, &opts)?)))
                .collect()
        }
        Protocol::TrialCentricK20 => {
            let mut queries: Vec<_> = corpus.spaces.iter().collect();
            queries.sort_by(|a, b| a.space_id.cmp(&b.space_id));
            queries
                .par_iter()
                .map(|s| Ok((s.space_id.clone(), matcher.match_space(s, &opts)?)))
                .collect()
        }
    };

    let resolved: Vec<Result<JudgedQuery, EvalError>> = per_query
        .into_par_iter()
        .map(|r| {
            let (query, candidates) = r?;
            let mut judged = Vec::new();
            let mut missing = Vec::new();
            for c in &candidates {
                let (summary, space) = match protocol {
                    Protocol::PatientCentricK10 => (&c.query_ref, &c.item_ref),
                    Protocol::TrialCentricK20 => (&c.item_ref, &c.query_ref),
                };
                let sref: SummaryRef = summary
                    .parse()
                    .map_err(|e: crate::datamodel::DataError| EvalError::Gold(e.to_string()))?;
                match gold.label(&sref, space)? {
                    Some(l) => judged.push((l, c.passed)),
                    None => missing.push(MissingGold {
                        query_ref: c.query_ref.clone(),
                        item_ref: c.item_ref.clone(),
                    }),
                }
            }
            Ok((query, judged, missing))
        })
        .collect();

    let mut only = Vec::new();
    let mut checked = Vec::new();
    let mut missing_gold = Vec::new();
    let mut excluded_queries = 0;
    for r in resolved {
        let (query_id, judged, missing) = r?;
        if !missing.is_empty() {
            excluded_queries += 1;
            missing_gold.extend(missing);
            continue;
        }
        only.push(RankedJudgments {
            query_id: query_id.clone(),
            relevance: judged.iter().map(|(l, _)| *l).collect(),
        });
        checked.push(RankedJudgments {
            query_id,
            relevance: judged.iter().filter(|(_, p)| *p).map(|(l, _)| *l).collect(),
        });
    }
    Ok(ProtocolOutcome {
        retrieval_only: report(protocol, Variant::RetrievalOnly, &only),
        retrieval_plus_checker: report(protocol, Variant::RetrievalPlusChecker, &checked),
        missing_gold,
        excluded_queries,
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Human-readable table with one row per metric and one column per variant.
pub fn render_table(outcome: &ProtocolOutcome) -> String {
    let (a, b) = (&outcome.retrieval_only, &outcome.retrieval_plus_checker);
    let k = a.k;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Protocol: {} (queries evaluated: {}, excluded for missing gold: {})",
        a.protocol.as_str(),
        a.n_queries,
        outcome.excluded_queries
    );
    let _ = writeln!(s, "| Metric | Retrieval alone | Retrieval + checker |");
    let _ = writeln!(s, "|---|---|---|");
    let _ = writeln!(s, "| Precision @ {k} | {} | {} |", fmt_metric(a.precision_at_k), fmt_metric(b.precision_at_k));
    let _ = writeln!(s, "| MAP @ {k} | {} | {} |", fmt_metric(a.map_at_k), fmt_metric(b.map_at_k));
    let _ = writeln!(s, "| Median results returned per query (N) | {} | {} |", a.median_results, b.median_results);
    let _ = writeln!(s, "| Mean results returned per query (N) | {:.2} | {:.2} |", a.mean_results, b.mean_results);
    let _ = writeln!(s, "| Queries with zero results | {} | {} |", a.n_empty_queries, b.n_empty_queries);
    s
}

/// The two reports as JSON lines.
pub fn render_jsonl(outcome: &ProtocolOutcome) -> String {
    let mut s = String::new();
    for r in [&outcome.retrieval_only, &outcome.retrieval_plus_checker] {
        s.push_str(&serde_json::to_string(r).expect("report serializes"));
        s.push('\n');
    }
    s
}

/// One record of the projection-exchange file. Exports carry `vector`; an
/// external projection tool returns the same records with `coords` filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub id: String,
    pub organ: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<[f64; 2]>,
}

pub fn write_projection(path: &Path, records: &[ProjectionRecord]) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| io(e.into()))?;
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_projection(path: &Path) -> Result<Vec<ProjectionRecord>, EvalError> {
    let io = |message: String| EvalError::Io {
        path: path.display().to_string(),
        message,
    };
    let f = std::fs::File::open(path).map_err(|e| io(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
