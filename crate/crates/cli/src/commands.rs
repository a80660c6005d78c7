//! Command-line surface: one subcommand per pipeline stage plus the service.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tracing::{info, warn};
use trialmatch::cascade::{index_corpus, Matcher, PairChecker};
use trialmatch::condenser::{condense, CondensedRecord};
use trialmatch::ctgov::{sample_trials, RegistryQuery, StatusFilter};
use trialmatch::datamodel::{
    load_corpus, read_jsonl, write_jsonl, ClinicalDocument, LoadOptions, PatientSummary, Split,
    SummarySource, TrialRecord, TrialSpace,
};
use trialmatch::embedding::{Embedder, RemoteEmbedder};
use trialmatch::evalkit::{self, CorpusGold, GoldSource, LlmGold, Protocol};
use trialmatch::index::VectorIndex;
use trialmatch::synthgen::{self, SynthSpec};
use trialmatch::trainprep::{self, CheckedPair, MiningRound};

use crate::config::ServiceConfig;
use crate::providers::{self, Providers};
use crate::server::{self, AppState};
use crate::snapshot::{patient_hits_tsv, space_hits_tsv, Defaults, PatientMatchRequest, Snapshot, SpaceMatchRequest};

#[derive(Debug, Parser)]
#[command(name = "trialmatch", version, about = "Match cancer patients and clinical trial spaces")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "TRIALMATCH_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every sampling step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Use the offline mock model providers regardless of configuration.
    #[arg(long, global = true)]
    pub mock_providers: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch trial records from the public registry.
    IngestTrials(IngestArgs),
    /// Extract clinical spaces from trial eligibility text.
    ExtractSpaces(ExtractArgs),
    /// Condense clinical documents to concept-bearing sentences.
    Condense(CondenseArgs),
    /// Summarize condensed records.
    Summarize(SummarizeArgs),
    /// Embed a corpus and write the vector index.
    EmbedIndex(EmbedIndexArgs),
    /// Rank spaces for a patient or patients for a space.
    Match(MatchArgs),
    /// Build training datasets.
    Trainprep(TrainprepArgs),
    /// Run the evaluation protocols.
    Eval(EvalArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Comma-separated NCT ids.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    /// File with one NCT id per line.
    #[arg(long)]
    pub ids_file: Option<PathBuf>,
    /// Enumerate registry trials for this condition instead of giving ids.
    #[arg(long)]
    pub condition: Option<String>,
    #[arg(long)]
    pub as_of: Option<NaiveDate>,
    /// Include studies in any status when enumerating.
    #[arg(long)]
    pub any_status: bool,
    /// Keep a seeded random sample of this many ids.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub registry_base_url: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Requests per second; 0 disables limiting.
    #[arg(long)]
    pub rate_limit: Option<f64>,
    /// Also write the selected id list.
    #[arg(long)]
    pub ids_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CondenseArgs {
    #[arg(long)]
    pub documents: PathBuf,
    /// Only this patient.
    #[arg(long)]
    pub patient_id: Option<String>,
    /// Cutoff date; defaults to each patient's latest document.
    #[arg(long)]
    pub as_of: Option<NaiveDate>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    TrialEnrollment,
    StandardOfCare,
    UserEntered,
}

impl From<SourceArg> for SummarySource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::TrialEnrollment => SummarySource::TrialEnrollment,
            SourceArg::StandardOfCare => SummarySource::StandardOfCare,
            SourceArg::UserEntered => SummarySource::UserEntered,
        }
    }
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub condensed: PathBuf,
    #[arg(long, value_enum, default_value = "standard-of-care")]
    pub source: SourceArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedIndexArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Binary vector cache to read before and write after embedding.
    #[arg(long)]
    pub vector_cache: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(subcommand)]
    pub side: MatchSide,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum MatchSide {
    /// Spaces for a patient summary.
    Patient {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, conflicts_with = "patient_id")]
        summary_file: Option<PathBuf>,
        #[arg(long)]
        patient_id: Option<String>,
        #[arg(long)]
        as_of: Option<NaiveDate>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Print only candidates that passed the checker.
        #[arg(long)]
        passed_only: bool,
        /// Print the service's JSON response instead of tab-separated lines.
        #[arg(long)]
        json: bool,
    },
    /// Patient summaries for a space.
    Space {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, conflicts_with = "space_file")]
        space_id: Option<String>,
        #[arg(long)]
        space_file: Option<PathBuf>,
        /// Accrual window source for `--space-file`.
        #[arg(long)]
        nct_id: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        split: Vec<Split>,
        #[arg(long)]
        passed_only: bool,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct TrainprepArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub tagger_sample: usize,
    #[arg(long, default_value_t = 1)]
    pub neg_ratio: usize,
    #[arg(long, default_value_t = 10)]
    pub k_patient: usize,
    #[arg(long, default_value_t = 20)]
    pub k_space: usize,
    /// Embedding service of the final model for the second mining round;
    /// the configured embedder is reused when absent.
    #[arg(long)]
    pub final_embedding_url: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    #[value(name = "patient_centric")]
    PatientCentric,
    #[value(name = "trial_centric")]
    TrialCentric,
    #[value(name = "all", alias = "both")]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Table,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GoldArg {
    /// Stored labels only; unlabeled pairs exclude their query.
    Corpus,
    /// Stored labels, then a live reasonable-consideration check.
    Llm,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "all")]
    pub protocol: ProtocolArg,
    #[arg(long, value_enum, default_value = "table")]
    pub format: FormatArg,
    #[arg(long, value_enum, default_value = "llm")]
    pub gold: GoldArg,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write checker AUROC, AUPRC and calibration over validation-split labels.
    #[arg(long)]
    pub checker_metrics: Option<PathBuf>,
    /// Also write the projection-exchange file (vectors with organ labels).
    #[arg(long)]
    pub projection_export: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Spec file, TOML or JSON by extension.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub listen: Option<String>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = ServiceConfig::load(cli.config.as_deref())?;
    let mock = cli.mock_providers;
    match cli.command {
        Command::IngestTrials(a) => ingest(&config, a, cli.seed),
        Command::ExtractSpaces(a) => extract(&Providers::build(&config, mock)?, a),
        Command::Condense(a) => condense_cmd(&Providers::build(&config, mock)?, a),
        Command::Summarize(a) => summarize(&Providers::build(&config, mock)?, a),
        Command::EmbedIndex(a) => {
            if let Some(c) = a.corpus.clone() {
                config.corpus = Some(c);
            }
            embed_index(&config, &Providers::build(&config, mock)?, a)
        }
        Command::Match(a) => match_cmd(&mut config, mock, a),
        Command::Trainprep(a) => {
            if let Some(c) = a.corpus.clone() {
                config.corpus = Some(c);
            }
            trainprep_cmd(&config, &Providers::build(&config, mock)?, a, cli.seed)
        }
        Command::Eval(a) => {
            apply_corpus_args(&mut config, &a.corpus);
            eval_cmd(&config, &Providers::build(&config, mock)?, a)
        }
        Command::Synth(a) => synth(&config, mock, a),
        Command::Serve(a) => {
            if let Some(l) = a.listen.clone() {
                config.listen = l;
            }
            apply_corpus_args(&mut config, &a.corpus);
            serve(config, mock)
        }
    }
}

fn apply_corpus_args(config: &mut ServiceConfig, a: &CorpusArgs) {
    if let Some(c) = &a.corpus {
        config.corpus = Some(c.clone());
    }
    if let Some(i) = &a.index {
        config.index = Some(i.clone());
    }
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn ingest(config: &ServiceConfig, a: IngestArgs, seed: u64) -> Result<()> {
    let client = providers::registry(config, a.registry_base_url, a.cache_dir, a.rate_limit);
    let mut ids: Vec<String> = a.ids.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if let Some(f) = &a.ids_file {
        let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        ids.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string));
    }
    if let Some(condition) = a.condition {
        let query = RegistryQuery {
            condition,
            as_of: a.as_of,
            status_filter: if a.any_status { StatusFilter::Any } else { StatusFilter::RecruitingOnly },
            ..RegistryQuery::new("")
        };
        let listed = client.list_open_trials(&query)?;
        info!(count = listed.len(), "registry enumeration done");
        ids.extend(listed);
    }
    if ids.is_empty() {
        bail!("no trial ids: give --ids, --ids-file or --condition");
    }
    if let Some(n) = a.sample {
        ids = sample_trials(&ids, n, seed)?;
    }
    if let Some(p) = &a.ids_out {
        write_text(Some(p), &ids.iter().map(|i| format!("{i}\n")).collect::<String>())?;
    }
    let mut trials = Vec::new();
    let mut failed = 0;
    for id in &ids {
        match client.fetch_trial(id) {
            Ok(t) => trials.push(t),
            Err(e) => {
                warn!(nct = %id, error = %e, "fetch failed");
                failed += 1;
            }
        }
    }
    trials.sort_by(|x, y| x.nct_id.cmp(&y.nct_id));
    write_jsonl(&a.out, &trials)?;
    eprintln!("fetched {} trials, {failed} failed", trials.len());
    if trials.is_empty() {
        bail!("no trial could be fetched");
    }
    Ok(())
}

fn extract(p: &Providers, a: ExtractArgs) -> Result<()> {
    let trials: Vec<TrialRecord> = read_jsonl(&a.trials, None, LoadOptions::default())?;
    let mut spaces: Vec<TrialSpace> = Vec::new();
    let mut failed = 0;
    for t in &trials {
        match p.gateway.extract_trial_spaces(t) {
            Ok(s) => spaces.extend(s),
            Err(e) => {
                warn!(nct = %t.nct_id, error = %e, "extraction failed");
                failed += 1;
            }
        }
    }
    write_jsonl(&a.out, &spaces)?;
    eprintln!("extracted {} spaces from {} trials, {failed} failed", spaces.len(), trials.len() - failed);
    if spaces.is_empty() && !trials.is_empty() {
        bail!("no spaces extracted");
    }
    Ok(())
}

fn condense_cmd(p: &Providers, a: CondenseArgs) -> Result<()> {
    let docs: Vec<ClinicalDocument> = read_jsonl(&a.documents, None, LoadOptions::default())?;
    let mut by_patient: BTreeMap<&str, Vec<ClinicalDocument>> = BTreeMap::new();
    for d in &docs {
        if a.patient_id.as_deref().is_none_or(|p| p == d.patient_id) {
            by_patient.entry(d.patient_id.as_str()).or_default().push(d.clone());
        }
    }
    let mut out: Vec<CondensedRecord> = Vec::new();
    let mut skipped = 0;
    for (pid, docs) in by_patient {
        let as_of = a.as_of.unwrap_or_else(|| docs.iter().map(|d| d.date).max().expect("non-empty group"));
        match condense(&docs, p.tagger.as_ref(), a.threshold, as_of) {
            Ok(r) => out.push(r),
            Err(e) => {
                warn!(patient = pid, error = %e, "condensing failed");
                skipped += 1;
            }
        }
    }
    write_jsonl(&a.out, &out)?;
    eprintln!("condensed {} patients, {skipped} skipped", out.len());
    Ok(())
}

fn summarize(p: &Providers, a: SummarizeArgs) -> Result<()> {
    let records: Vec<CondensedRecord> = read_jsonl(&a.condensed, None, LoadOptions::default())?;
    let mut out: Vec<PatientSummary> = Vec::new();
    for r in &records {
        match p.gateway.summarize_patient(r, a.source.into()) {
            Ok(s) => out.push(s),
            Err(e) => warn!(patient = %r.patient_id, error = %e, "summarization failed"),
        }
    }
    write_jsonl(&a.out, &out)?;
    eprintln!("summarized {} of {} records", out.len(), records.len());
    Ok(())
}

fn load_configured_corpus(config: &ServiceConfig) -> Result<trialmatch::Corpus> {
    let dir = config.corpus.as_ref().context("no corpus: pass --corpus or set corpus in the config")?;
    load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn embed_index(config: &ServiceConfig, p: &Providers, a: EmbedIndexArgs) -> Result<()> {
    let corpus = load_configured_corpus(config)?;
    if let Some(c) = a.vector_cache.as_ref().filter(|c| c.exists()) {
        p.embedder.load_cache(c)?;
    }
    let index = index_corpus(&corpus, &p.embedder)?;
    index.save(&a.out)?;
    if let Some(c) = &a.vector_cache {
        p.embedder.save_cache(c)?;
    }
    eprintln!(
        "indexed {} summaries and {} spaces with {}",
        index.len(trialmatch::Side::Patient),
        index.len(trialmatch::Side::Space),
        p.embedder.provider_id()
    );
    Ok(())
}

fn load_snapshot(config: &ServiceConfig, p: &Providers) -> Result<Snapshot> {
    Snapshot::load(config, p.embedder.clone(), p.checker.clone())
}

fn match_cmd(config: &mut ServiceConfig, mock: bool, a: MatchArgs) -> Result<()> {
    let defaults = Defaults::from(&*config);
    match a.side {
        MatchSide::Patient { corpus, summary_file, patient_id, as_of, k, threshold, passed_only, json } => {
            apply_corpus_args(config, &corpus);
            let p = Providers::build(config, mock)?;
            let snapshot = load_snapshot(config, &p)?;
            let summary_text = match summary_file {
                Some(f) => Some(std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?),
                None => None,
            };
            let req = PatientMatchRequest {
                summary_text,
                patient_id,
                k,
                threshold,
                as_of_date: as_of,
                show_filtered: Some(!passed_only),
            };
            let resp = snapshot.match_patient(&req, &defaults)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&resp)?);
            } else {
                print!("{}", space_hits_tsv(&resp));
            }
        }
        MatchSide::Space { corpus, space_id, space_file, nct_id, k, threshold, split, passed_only, json } => {
            apply_corpus_args(config, &corpus);
            let p = Providers::build(config, mock)?;
            let snapshot = load_snapshot(config, &p)?;
            let space_text = match space_file {
                Some(f) => Some(std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?),
                None => None,
            };
            let req = SpaceMatchRequest {
                space_id,
                space_text,
                nct_id,
                k,
                threshold,
                show_filtered: Some(!passed_only),
                split_in: (!split.is_empty()).then_some(split),
                temporal: None,
            };
            let resp = snapshot.match_space(&req, &defaults)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&resp)?);
            } else {
                print!("{}", patient_hits_tsv(&resp));
            }
        }
    }
    Ok(())
}

fn trainprep_cmd(config: &ServiceConfig, p: &Providers, a: TrainprepArgs, seed: u64) -> Result<()> {
    let corpus = load_configured_corpus(config)?;
    let tagger = trainprep::build_tagger_dataset(&corpus.documents, &p.gateway, a.tagger_sample, seed)?;
    let stage1 = trainprep::build_stage1_pairs(
        &corpus.enrollments,
        &corpus.spaces,
        &corpus.summaries,
        &p.gateway,
        a.neg_ratio,
        seed,
    )?;
    let index = Arc::new(index_corpus(&corpus, &p.embedder)?);
    let matcher = Matcher::new(index, p.embedder.clone(), &corpus);
    let mined_b = trainprep::mine_hard_negatives(
        &matcher,
        &corpus.summaries,
        &corpus.spaces,
        &p.gateway,
        a.k_patient,
        a.k_space,
        MiningRound::Round1,
    )?;
    let final_matcher = match &a.final_embedding_url {
        Some(url) => {
            let e = Arc::new(Embedder::new(Arc::new(RemoteEmbedder::new(
                url.clone(),
                config.providers.embedding_dimension,
                None,
            ))));
            Matcher::new(Arc::new(index_corpus(&corpus, &e)?), e, &corpus)
        }
        None => {
            info!("no final embedding model given; round 2 mines with the configured embedder");
            matcher
        }
    };
    let mined_c = trainprep::mine_hard_negatives(
        &final_matcher,
        &corpus.summaries,
        &corpus.spaces,
        &p.gateway,
        a.k_patient,
        a.k_space,
        MiningRound::Round2,
    )?;
    let b: Vec<CheckedPair> = mined_b.pairs.iter().map(CheckedPair::from).collect();
    let c: Vec<CheckedPair> = mined_c.pairs.iter().map(CheckedPair::from).collect();
    let checker = trainprep::build_checker_dataset(&stage1.enrolled_checked, &b, &c)?;

    let mut embed_pairs = stage1.pairs.clone();
    embed_pairs.extend(mined_b.pairs.iter().cloned());
    std::fs::create_dir_all(&a.out)?;
    let paths = [
        a.out.join(trainprep::TAGGER_FILE),
        a.out.join(trainprep::RANKING_FILE),
        a.out.join(trainprep::CONTRASTIVE_FILE),
        a.out.join(trainprep::CHECKER_FILE),
    ];
    let counts = [
        trainprep::write_tagger_file(&paths[0], &tagger.examples)?,
        trainprep::write_ranking_file(&paths[1], &embed_pairs)?,
        trainprep::write_contrastive_file(&paths[2], &embed_pairs)?,
        trainprep::write_checker_file(&paths[3], &checker.examples)?,
    ];
    trainprep::scan_leakage(&paths[0], &[Split::Train, Split::Validation])?;
    for path in &paths[1..] {
        trainprep::scan_leakage(path, &[Split::Train])?;
    }
    let report = json!({
        "tagger_examples": counts[0],
        "tagger_skipped": tagger.skipped_unparseable,
        "ranking_pairs": counts[1],
        "contrastive_pairs": counts[2],
        "checker_examples": counts[3],
        "checker_duplicates_dropped": checker.duplicates_dropped,
        "checker_conflicts_resolved": checker.conflicts_resolved,
        "stage1_missing_summaries": stage1.skipped_missing_summary,
        "unparseable_checks": stage1.skipped_unparseable + mined_b.skipped_unparseable + mined_c.skipped_unparseable,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Renders the requested protocol reports exactly as `eval` writes them.
pub fn eval_report(
    corpus: &trialmatch::Corpus,
    matcher: &Matcher,
    gold: &dyn GoldSource,
    protocol: ProtocolArg,
    format: FormatArg,
    threshold: f64,
) -> Result<String> {
    let protocols: &[Protocol] = match protocol {
        ProtocolArg::PatientCentric => &[Protocol::PatientCentricK10],
        ProtocolArg::TrialCentric => &[Protocol::TrialCentricK20],
        ProtocolArg::Both => &[Protocol::PatientCentricK10, Protocol::TrialCentricK20],
    };
    let mut out = String::new();
    for (i, p) in protocols.iter().enumerate() {
        let outcome = evalkit::run_protocol(corpus, matcher, *p, threshold, gold)?;
        match format {
            FormatArg::Table => {
                if i > 0 {
                    out.push('\n');
                }
                out.push_str(&evalkit::render_table(&outcome));
            }
            FormatArg::Jsonl => out.push_str(&evalkit::render_jsonl(&outcome)),
        }
        if !outcome.missing_gold.is_empty() {
            warn!(protocol = p.as_str(), pairs = outcome.missing_gold.len(), queries = outcome.excluded_queries, "queries excluded for missing gold labels");
        }
    }
    Ok(out)
}

fn eval_cmd(config: &ServiceConfig, p: &Providers, a: EvalArgs) -> Result<()> {
    let corpus = load_configured_corpus(config)?;
    let index = match config.index.as_ref().filter(|i| i.exists()) {
        Some(i) => VectorIndex::load(i)?,
        None => index_corpus(&corpus, &p.embedder)?,
    };
    let matcher = Matcher::new(Arc::new(index), p.embedder.clone(), &corpus).with_checker(p.checker.clone());
    let threshold = a.threshold.unwrap_or(config.threshold);
    let report = match a.gold {
        GoldArg::Corpus => eval_report(&corpus, &matcher, &CorpusGold::new(&corpus), a.protocol, a.format, threshold)?,
        GoldArg::Llm => eval_report(&corpus, &matcher, &LlmGold::new(&corpus, &p.gateway), a.protocol, a.format, threshold)?,
    };
    write_text(a.out.as_deref(), &report)?;
    if let Some(path) = &a.checker_metrics {
        let checker = p.checker.as_ref().context("--checker-metrics needs a configured checker")?;
        write_text(Some(path), &checker_metrics(&corpus, checker.as_ref())?)?;
    }
    if let Some(path) = &a.projection_export {
        let records = projection_records(&corpus, p)?;
        evalkit::write_projection(path, &records)?;
    }
    Ok(())
}

/// Checker discrimination and calibration over labeled validation-split pairs.
fn checker_metrics(corpus: &trialmatch::Corpus, checker: &dyn PairChecker) -> Result<String> {
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for l in &corpus.labels {
        if trialmatch::assign_split(&l.summary_ref.patient_id)? != Split::Validation {
            continue;
        }
        if let (Some(s), Some(sp)) = (corpus.summary(&l.summary_ref), corpus.space(&l.space_id)) {
            pairs.push((s.text.as_str(), sp.raw_text.as_str()));
            labels.push(l.label);
        }
    }
    let scores = checker.score_batch(&pairs).map_err(anyhow::Error::msg)?;
    let v = json!({
        "checker": checker.id(),
        "n": scores.len(),
        "auroc": evalkit::auroc(&scores, &labels).ok(),
        "auprc": evalkit::auprc(&scores, &labels).ok(),
        "calibration": evalkit::calibration_curve(&scores, &labels, 10).ok(),
    });
    Ok(format!("{}\n", serde_json::to_string_pretty(&v)?))
}

fn projection_records(corpus: &trialmatch::Corpus, p: &Providers) -> Result<Vec<evalkit::ProjectionRecord>> {
    let mut out = Vec::new();
    let items = corpus
        .summaries
        .iter()
        .map(|s| (s.summary_ref().to_string(), s.text.as_str(), "summary"))
        .chain(corpus.spaces.iter().map(|s| (s.space_id.clone(), s.raw_text.as_str(), "space")));
    for (id, text, source) in items {
        let organ = match p.gateway.classify_organ(text) {
            Ok(o) => o.as_str().to_string(),
            Err(e) => {
                warn!(id = %id, error = %e, "organ classification failed");
                "None".to_string()
            }
        };
        let v = p.embedder.embed_one(text)?;
        out.push(evalkit::ProjectionRecord {
            id,
            organ,
            source: source.to_string(),
            vector: Some(v.values),
            coords: None,
        });
    }
    Ok(out)
}

pub fn read_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        Ok(toml::from_str(&text)?)
    } else {
        Ok(serde_json::from_str(&text)?)
    }
}

fn synth(config: &ServiceConfig, mock: bool, a: SynthArgs) -> Result<()> {
    let spec = read_spec(&a.spec)?;
    let p = Providers::build(config, mock)?;
    let output = synthgen::run_spec(&spec, &p.gateway, p.embedder.clone())?;
    synthgen::write_output(&output, &a.out)?;
    eprintln!(
        "wrote {} patients, {} trials, {} spaces, {} labels ({} patients failed)",
        output.corpus.patients.len(),
        output.corpus.trials.len(),
        output.corpus.spaces.len(),
        output.corpus.labels.len(),
        output.failed_patients
    );
    Ok(())
}

fn serve(config: ServiceConfig, mock: bool) -> Result<()> {
    let p = Providers::build(&config, mock)?;
    let token = server::auth_token(&config)?;
    let snapshot = match &config.corpus {
        Some(_) => Some(load_snapshot(&config, &p)?),
        None => {
            warn!("no corpus configured; match endpoints answer 409 until reloaded");
            None
        }
    };
    let state = Arc::new(AppState::new(config, p, snapshot, token));
    tokio::runtime::Runtime::new()?.block_on(server::serve(state))
}
