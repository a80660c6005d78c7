use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use trialmatch::cascade::{index_corpus, GatewayChecker, MatchOptions};
use trialmatch::datamodel::load_corpus;
use trialmatch::embedding::MockEmbedder;
use trialmatch::evalkit::{run_protocol, GoldSource, LlmGold, Protocol};
use trialmatch::synthgen::{self, SynthSpec};
use trialmatch::trainprep::{self, CheckedPair, MiningRound, TrainPrepError};
use trialmatch::{Corpus, Embedder, LlmGateway, Matcher, MockLlm, PairChecker, Split};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/desk")
}

fn gateway() -> Arc<LlmGateway> {
    Arc::new(LlmGateway::new(Arc::new(MockLlm::new()), "mock"))
}

fn embedder() -> Arc<Embedder> {
    Arc::new(Embedder::new(Arc::new(MockEmbedder::new())))
}

fn matcher(corpus: &Corpus, e: &Arc<Embedder>) -> Matcher {
    Matcher::new(Arc::new(index_corpus(corpus, e).unwrap()), e.clone(), corpus)
}

#[test]
fn fixture_regenerates_byte_identically() {
    check_fixture_regenerates_byte_identically();
}

pub fn check_fixture_regenerates_byte_identically() {
    let spec: SynthSpec =
        serde_json::from_str(&std::fs::read_to_string(fixture().join("spec.json")).unwrap()).unwrap();
    let out = synthgen::run_spec(&spec, &gateway(), embedder()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synthgen::write_output(&out, dir.path()).unwrap();
    let frozen = fixture().join("corpus");
    let mut names: Vec<String> = std::fs::read_dir(&frozen)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(names.len() >= 9);
    for name in names {
        let want = std::fs::read(frozen.join(&name)).unwrap();
        let got = std::fs::read(dir.path().join(&name)).unwrap();
        assert!(want == got, "{name} differs from the frozen fixture");
    }
}

#[test]
fn fixture_shape() {
    let c = load_corpus(&fixture().join("corpus")).unwrap();
    assert_eq!(c.patients.len(), 50);
    assert_eq!(c.trials.len(), 20);
    assert_eq!(c.spaces.len(), 40);
    assert!(c.validate().is_empty(), "{:?}", c.validate());
    assert!(!c.enrollments.is_empty());
    assert!(c.labels.iter().any(|l| l.label) && c.labels.iter().any(|l| !l.label));
}

#[test]
fn extraction_reproduces_fixture_spaces() {
    let c = load_corpus(&fixture().join("corpus")).unwrap();
    let g = gateway();
    let mut spaces = Vec::new();
    for t in &c.trials {
        spaces.extend(g.extract_trial_spaces(t).unwrap());
    }
    assert_eq!(spaces, c.spaces);
}

/// A checker that answers with the gold label of the pair.
struct OracleChecker(HashMap<(String, String), bool>);

impl PairChecker for OracleChecker {
    fn id(&self) -> &str {
        "oracle"
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, String> {
        pairs
            .iter()
            .map(|(s, p)| {
                self.0
                    .get(&(s.to_string(), p.to_string()))
                    .map(|l| if *l { 1.0 } else { 0.0 })
                    .ok_or_else(|| "pair without gold".to_string())
            })
            .collect()
    }
}

fn oracle(corpus: &Corpus, gold: &dyn GoldSource) -> OracleChecker {
    let mut map = HashMap::new();
    for s in &corpus.summaries {
        for p in &corpus.spaces {
            if let Some(l) = gold.label(&s.summary_ref(), &p.space_id).unwrap() {
                let prev = map.insert((s.text.clone(), p.raw_text.clone()), l);
                assert!(prev.is_none_or(|x| x == l), "text pair with two gold labels");
            }
        }
    }
    OracleChecker(map)
}

#[test]
fn oracle_checker_gives_perfect_precision() {
    check_oracle_checker_gives_perfect_precision();
}

pub fn check_oracle_checker_gives_perfect_precision() {
    let c = load_corpus(&fixture().join("corpus")).unwrap();
    let g = gateway();
    let gold = LlmGold::new(&c, &g);
    let e = embedder();
    let m = matcher(&c, &e).with_checker(Some(Arc::new(oracle(&c, &gold))));
    for protocol in [Protocol::PatientCentricK10, Protocol::TrialCentricK20] {
        let out = run_protocol(&c, &m, protocol, 0.5, &gold).unwrap();
        assert_eq!(out.retrieval_plus_checker.precision_at_k, Some(1.0));
    }
}

#[test]
fn checker_only_removes_and_threshold_is_monotone() {
    check_checker_only_removes_and_threshold_is_monotone();
}

pub fn check_checker_only_removes_and_threshold_is_monotone() {
    let c = load_corpus(&fixture().join("corpus")).unwrap();
    let e = embedder();
    let plain = matcher(&c, &e);
    let checked = plain.clone().with_checker(Some(Arc::new(GatewayChecker::new(gateway()))));
    let lexical = plain
        .clone()
        .with_checker(Some(Arc::new(trialmatch::cascade::LexicalOverlapChecker)));
    for s in &c.summaries {
        let base = plain.match_patient(s, &MatchOptions::patient_default()).unwrap();
        let with = checked.match_patient(s, &MatchOptions::patient_default()).unwrap();
        let ids = |v: &[trialmatch::MatchCandidate]| v.iter().map(|x| x.item_ref.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&base), ids(&with));
        let mut prev: Option<BTreeSet<String>> = None;
        for t in [0.0, 0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9, 1.0] {
            let opts = MatchOptions {
                threshold: t,
                ..MatchOptions::patient_default()
            };
            let passed: BTreeSet<String> = lexical
                .match_patient(s, &opts)
                .unwrap()
                .into_iter()
                .filter(|x| x.passed)
                .map(|x| x.item_ref)
                .collect();
            assert!(passed.iter().all(|p| ids(&base).contains(p)));
            if let Some(p) = &prev {
                assert!(passed.is_subset(p));
            }
            prev = Some(passed);
        }
    }
}

#[test]
fn trainprep_outputs_have_no_cross_split_examples() {
    check_trainprep_outputs_have_no_cross_split_examples();
}

pub fn check_trainprep_outputs_have_no_cross_split_examples() {
    let c = load_corpus(&fixture().join("corpus")).unwrap();
    let g = gateway();
    let e = embedder();
    let tagger = trainprep::build_tagger_dataset(&c.documents, &g, 200, 1).unwrap();
    let stage1 = trainprep::build_stage1_pairs(&c.enrollments, &c.spaces, &c.summaries, &g, 1, 1).unwrap();
    let m = matcher(&c, &e);
    let b = trainprep::mine_hard_negatives(&m, &c.summaries, &c.spaces, &g, 10, 20, MiningRound::Round1).unwrap();
    let cp: Vec<CheckedPair> = b.pairs.iter().map(CheckedPair::from).collect();
    let checker = trainprep::build_checker_dataset(&stage1.enrolled_checked, &cp, &[]).unwrap();
    assert!(!tagger.examples.is_empty() && !stage1.pairs.is_empty() && !checker.examples.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let mut pairs = stage1.pairs.clone();
    pairs.extend(b.pairs.iter().cloned());
    trainprep::write_tagger_file(&p(trainprep::TAGGER_FILE), &tagger.examples).unwrap();
    trainprep::write_ranking_file(&p(trainprep::RANKING_FILE), &pairs).unwrap();
    trainprep::write_contrastive_file(&p(trainprep::CONTRASTIVE_FILE), &pairs).unwrap();
    trainprep::write_checker_file(&p(trainprep::CHECKER_FILE), &checker.examples).unwrap();
    assert!(trainprep::scan_leakage(&p(trainprep::TAGGER_FILE), &[Split::Train, Split::Validation]).unwrap() > 0);
    for f in [trainprep::RANKING_FILE, trainprep::CONTRASTIVE_FILE, trainprep::CHECKER_FILE] {
        assert!(trainprep::scan_leakage(&p(f), &[Split::Train]).unwrap() > 0, "{f}");
    }

    // An injected test-split record must be caught.
    let test_patient = c
        .patients
        .iter()
        .find(|x| trialmatch::assign_split(&x.patient_id).unwrap() == Split::Test)
        .unwrap();
    let mut text = std::fs::read_to_string(p(trainprep::CHECKER_FILE)).unwrap();
    text.push_str(&format!("{{\"schema_version\":1,\"patient_id\":\"{}\"}}\n", test_patient.patient_id));
    std::fs::write(p("bad.jsonl"), text).unwrap();
    assert!(matches!(
        trainprep::scan_leakage(&p("bad.jsonl"), &[Split::Train]),
        Err(TrainPrepError::Leakage { .. })
    ));
}

#[test]
fn organ_groups_are_cohesive_under_mock_embeddings() {
    check_organ_groups_are_cohesive_under_mock_embeddings();
}

pub fn check_organ_groups_are_cohesive_under_mock_embeddings() {
    let c = load_corpus(&fixture().join("corpus")).unwrap();
    let g = gateway();
    let e = embedder();
    let texts: Vec<&str> = c
        .summaries
        .iter()
        .map(|s| s.text.as_str())
        .chain(c.spaces.iter().map(|s| s.raw_text.as_str()))
        .collect();
    let labels: Vec<String> = texts
        .iter()
        .map(|t| g.classify_organ(t).unwrap().as_str().to_string())
        .collect();
    assert!(labels.iter().collect::<BTreeSet<_>>().len() >= 2);
    let vectors: Vec<Vec<f32>> = e.embed(&texts).unwrap().into_iter().map(|v| v.values).collect();
    let (within, between) = trialmatch::evalkit::cosine_cohesion(&vectors, &labels).unwrap();
    println!("within-organ cosine {within:.3}, between-organ cosine {between:.3}");
    assert!(within > between);
}
