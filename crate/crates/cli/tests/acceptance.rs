//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

#![allow(dead_code, unused_imports)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

#[path = "../../core/tests/diagnostics.rs"]
mod diagnostics;
#[path = "../../core/tests/exact_search.rs"]
mod exact_search;
#[path = "../../core/tests/fixture_pipeline.rs"]
mod fixture_pipeline;
#[path = "../../core/tests/metric_oracles.rs"]
mod metric_oracles;
#[path = "../../core/tests/parsers.rs"]
mod parsers;
#[path = "../../core/tests/splits_and_embedding.rs"]
mod splits_and_embedding;
#[path = "../../core/tests/temporal_filter.rs"]
mod temporal_filter;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    checks: &'static [fn()],
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/desk")
}

fn golden_eval() {
    let dir = tempfile::tempdir().unwrap();
    for protocol in ["patient_centric", "trial_centric"] {
        for (format, ext) in [("table", "md"), ("jsonl", "jsonl")] {
            let out = dir.path().join(format!("{protocol}.{ext}"));
            let status = Command::new(env!("CARGO_BIN_EXE_trialmatch"))
                .args(["--mock-providers", "eval", "--corpus"])
                .arg(fixture().join("corpus"))
                .args(["--protocol", protocol, "--format", format, "--out"])
                .arg(&out)
                .status()
                .unwrap();
            assert!(status.success(), "eval exited with {status}");
            let want = std::fs::read(fixture().join(format!("golden/eval_{protocol}.{ext}"))).unwrap();
            let got = std::fs::read(&out).unwrap();
            assert!(want == got, "{protocol}.{ext} differs from the golden report");
            if ext == "md" {
                let text = String::from_utf8(got).unwrap();
                assert!(text.contains("| Median results returned per query (N) |"));
                assert!(text.contains("| Mean results returned per query (N) |"));
            }
        }
    }
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        name: "metric oracles (precision@k, AP/MAP, AUROC, AUPRC, AUROC invariance)",
        budget: Some(Duration::from_secs(10)),
        checks: &[
            metric_oracles::check_ranking_metrics_match_brute_force,
            metric_oracles::check_classifier_metrics_match_brute_force,
            metric_oracles::check_auroc_is_invariant_under_monotone_transforms,
        ],
    },
    Criterion {
        name: "exact search equals full scan, deterministic under 8-way replay",
        budget: Some(Duration::from_secs(5)),
        checks: &[
            exact_search::check_top_k_equals_full_scan,
            exact_search::check_concurrent_replay_is_deterministic,
        ],
    },
    Criterion {
        name: "cascade only removes, threshold monotone, oracle checker precision 1.0",
        budget: Some(Duration::from_secs(5)),
        checks: &[
            fixture_pipeline::check_checker_only_removes_and_threshold_is_monotone,
            fixture_pipeline::check_oracle_checker_gives_perfect_precision,
        ],
    },
    Criterion {
        name: "temporal filter has zero window violations over 10,000 trials",
        budget: None,
        checks: &[
            temporal_filter::check_window_predicate_matches_oracle_on_random_cases,
            temporal_filter::check_no_retrieved_space_violates_the_window,
        ],
    },
    Criterion {
        name: "mock eval reproduces the golden reports byte for byte",
        budget: Some(Duration::from_secs(60)),
        checks: &[fixture_pipeline::check_fixture_regenerates_byte_identically, golden_eval],
    },
    Criterion {
        name: "parser fixtures and prompt checksums",
        budget: None,
        checks: &[
            parsers::check_space_list_fixtures,
            parsers::check_duplicate_spaces_collapse_within_a_trial,
            parsers::check_decision_fixtures,
            parsers::check_organ_vocabulary,
            parsers::check_prompt_resources_match_pinned_checksums,
        ],
    },
    Criterion {
        name: "split proportions, split consistency, trainprep leakage scan",
        budget: None,
        checks: &[
            splits_and_embedding::check_split_proportions_on_ten_thousand_ids,
            splits_and_embedding::check_split_matches_independent_fnv,
            splits_and_embedding::check_split_is_consistent_across_datasets,
            fixture_pipeline::check_trainprep_outputs_have_no_cross_split_examples,
        ],
    },
    Criterion {
        name: "MMD two-sample test and kNN outlier filter",
        budget: Some(Duration::from_secs(30)),
        checks: &[
            diagnostics::check_identical_samples_give_zero_statistic,
            diagnostics::check_separated_gaussians_are_detected,
            diagnostics::check_statistic_matches_direct_formula_and_seed_is_reproducible,
            diagnostics::check_knn_filter_drops_planted_outlier,
            diagnostics::check_knn_filter_keeps_tight_clusters_and_small_groups,
        ],
    },
    Criterion {
        name: "within-organ cosine exceeds between-organ cosine on the fixture",
        budget: None,
        checks: &[fixture_pipeline::check_organ_groups_are_cohesive_under_mock_embeddings],
    },
];

fn main() {
    let mut failed = 0;
    for (i, c) in CRITERIA.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| c.checks.iter().for_each(|f| f())));
        let elapsed = start.elapsed();
        let verdict = match (&outcome, c.budget) {
            (Err(_), _) => "FAIL",
            (Ok(()), Some(b)) if elapsed > b => "FAIL (over time budget)",
            _ => "PASS",
        };
        if verdict != "PASS" {
            failed += 1;
        }
        let budget = c.budget.map(|b| format!(", budget {}s", b.as_secs())).unwrap_or_default();
        println!("[{}/{}] {verdict}: {} ({:.2}s{budget})", i + 1, CRITERIA.len(), c.name, elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", CRITERIA.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
