use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialmatch::evalkit::{self, auprc, auroc, average_precision, map_at_k, precision_at_k, RankedJudgments};

const TOL: f64 = 1e-9;
const INSTANCES: usize = 200;

fn oracle_precision_at_k(lists: &[Vec<bool>], k: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for l in lists {
        let cut = &l[..l.len().min(k)];
        if cut.is_empty() {
            continue;
        }
        let rel = cut.iter().filter(|r| **r).count();
        total += rel as f64 / cut.len() as f64;
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

// AP over the returned list, normalized by relevant items returned.
fn oracle_ap(list: &[bool]) -> f64 {
    let relevant: Vec<usize> = (0..list.len()).filter(|i| list[*i]).collect();
    if relevant.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in &relevant {
        let above = list[..=i].iter().filter(|r| **r).count();
        total += above as f64 / (i + 1) as f64;
    }
    total / relevant.len() as f64
}

fn oracle_map_at_k(lists: &[Vec<bool>], k: usize) -> Option<f64> {
    let aps: Vec<f64> = lists
        .iter()
        .map(|l| &l[..l.len().min(k)])
        .filter(|l| !l.is_empty())
        .map(oracle_ap)
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn oracle_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

// Step-integrated precision envelope over thresholds at each distinct score.
fn oracle_auprc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|l| **l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|t| {
            let tp = (0..scores.len()).filter(|i| scores[*i] >= *t && labels[*i]).count() as f64;
            let predicted = scores.iter().filter(|s| **s >= *t).count() as f64;
            (tp / pos, tp / predicted)
        })
        .collect();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (recall, _) in &points {
        let best = points
            .iter()
            .filter(|(r, _)| *r >= *recall)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        area += (recall - prev_recall) * best;
        prev_recall = *recall;
    }
    area
}

fn random_lists(rng: &mut ChaCha8Rng) -> Vec<RankedJudgments> {
    let n = rng.gen_range(1..12);
    (0..n)
        .map(|q| {
            let len = rng.gen_range(0..25);
            let p = rng.gen_range(0.0..1.0);
            RankedJudgments {
                query_id: format!("q{q}"),
                relevance: (0..len).map(|_| rng.gen_bool(p)).collect(),
            }
        })
        .collect()
}

fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..60);
    // A coarse grid forces ties in about half of the instances.
    let grid: f64 = if rng.gen_bool(0.5) { 10.0 } else { 1e6 };
    loop {
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0..1.0f64) * grid).round() / grid).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().any(|l| *l) && labels.iter().any(|l| !*l) {
            return (scores, labels);
        }
    }
}

#[test]
fn ranking_metrics_match_brute_force() {
    check_ranking_metrics_match_brute_force();
}

pub fn check_ranking_metrics_match_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..INSTANCES {
        let judgments = random_lists(&mut rng);
        let lists: Vec<Vec<bool>> = judgments.iter().map(|j| j.relevance.clone()).collect();
        for k in [1, 5, 10, 20] {
            match oracle_precision_at_k(&lists, k) {
                Some(want) => {
                    assert!((precision_at_k(&judgments, k).unwrap() - want).abs() < TOL);
                    let want_map = oracle_map_at_k(&lists, k).unwrap();
                    assert!((map_at_k(&judgments, k).unwrap() - want_map).abs() < TOL);
                }
                None => {
                    assert!(precision_at_k(&judgments, k).is_err());
                    assert!(map_at_k(&judgments, k).is_err());
                }
            }
        }
        for l in &lists {
            if !l.is_empty() {
                assert!((average_precision(l).unwrap() - oracle_ap(l)).abs() < TOL);
            }
        }
    }
    assert!(start.elapsed().as_secs() < 10);
}

#[test]
fn classifier_metrics_match_brute_force() {
    check_classifier_metrics_match_brute_force();
}

pub fn check_classifier_metrics_match_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..INSTANCES {
        let (scores, labels) = random_scores(&mut rng);
        let a = auroc(&scores, &labels).unwrap();
        assert!((a - oracle_auroc(&scores, &labels)).abs() < TOL);
        let p = auprc(&scores, &labels).unwrap();
        assert!((p - oracle_auprc(&scores, &labels)).abs() < TOL, "{p} vs {}", oracle_auprc(&scores, &labels));
    }
    assert!(start.elapsed().as_secs() < 10);
}

#[test]
fn auroc_is_invariant_under_monotone_transforms() {
    check_auroc_is_invariant_under_monotone_transforms();
}

pub fn check_auroc_is_invariant_under_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..INSTANCES {
        let (scores, labels) = random_scores(&mut rng);
        let a = auroc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
        assert_eq!(a, auroc(&cubed, &labels).unwrap());
        assert_eq!(a, auroc(&shifted, &labels).unwrap());
    }
}

#[test]
fn known_values() {
    let j = vec![RankedJudgments {
        query_id: "q".into(),
        relevance: vec![true, false, true, false],
    }];
    assert!((precision_at_k(&j, 4).unwrap() - 0.5).abs() < TOL);
    // (1/1 + 2/3) / 2
    assert!((map_at_k(&j, 4).unwrap() - 5.0 / 6.0).abs() < TOL);
    assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn empty_queries_are_excluded_from_the_mean() {
    let j = vec![
        RankedJudgments { query_id: "a".into(), relevance: vec![true] },
        RankedJudgments { query_id: "b".into(), relevance: vec![] },
    ];
    assert_eq!(precision_at_k(&j, 10).unwrap(), 1.0);
    assert_eq!(evalkit::empty_queries(&j), 1);
}

#[test]
fn calibration_bins_partition_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let scores: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let labels: Vec<bool> = scores.iter().map(|s| rng.gen_bool(*s)).collect();
    let bins = evalkit::calibration_curve(&scores, &labels, 10).unwrap();
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 500);
    for b in &bins {
        assert!((b.mean_score - b.bin_mid).abs() <= 0.05 + 1e-12);
    }
}
