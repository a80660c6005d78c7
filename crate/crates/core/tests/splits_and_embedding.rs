use std::hash::Hasher;

use trialmatch::datamodel::{assign_split, split_bucket};
use trialmatch::embedding::{mock_tokens, EmbeddingProvider, MockEmbedder};
use trialmatch::Split;

fn fnv_oracle(id: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(id.as_bytes());
    h.finish()
}

#[test]
fn split_proportions_on_ten_thousand_ids() {
    check_split_proportions_on_ten_thousand_ids();
}

pub fn check_split_proportions_on_ten_thousand_ids() {
    let mut counts = [0usize; 3];
    for i in 0..10_000 {
        let id = format!("PT-{i:06}");
        let s = assign_split(&id).unwrap();
        counts[s as usize] += 1;
    }
    let pct = |c: usize| c as f64 / 100.0;
    assert!((pct(counts[0]) - 80.0).abs() <= 1.5, "{counts:?}");
    assert!((pct(counts[1]) - 10.0).abs() <= 1.5, "{counts:?}");
    assert!((pct(counts[2]) - 10.0).abs() <= 1.5, "{counts:?}");
}

#[test]
fn split_matches_independent_fnv() {
    check_split_matches_independent_fnv();
}

pub fn check_split_matches_independent_fnv() {
    for i in 0..2000 {
        let id = format!("patient/{i}");
        let bucket = (fnv_oracle(&id) % 100) as u8;
        assert_eq!(split_bucket(&id).unwrap(), bucket);
        let want = match bucket {
            0..=79 => Split::Train,
            80..=89 => Split::Validation,
            _ => Split::Test,
        };
        assert_eq!(assign_split(&id).unwrap(), want);
    }
    assert!(assign_split("").is_err());
}

#[test]
fn split_is_consistent_across_datasets() {
    check_split_is_consistent_across_datasets();
}

pub fn check_split_is_consistent_across_datasets() {
    // The same id always lands in the same split wherever it is seen.
    let ids: Vec<String> = (0..500).map(|i| format!("X{i}")).collect();
    let first: Vec<Split> = ids.iter().map(|i| assign_split(i).unwrap()).collect();
    let mut shuffled = ids.clone();
    shuffled.reverse();
    for id in &shuffled {
        let pos = ids.iter().position(|x| x == id).unwrap();
        assert_eq!(assign_split(id).unwrap(), first[pos]);
    }
}

struct Oracle(u64);

impl Oracle {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
}

fn oracle_embed(text: &str, dim: usize) -> Vec<f32> {
    let lower = text.to_lowercase();
    let stop = [
        "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "in", "is", "it", "of", "on", "or",
        "the", "to", "was", "were", "with",
    ];
    let mut tokens: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !stop.contains(t))
        .collect();
    if tokens.is_empty() {
        tokens.push(&lower);
    }
    let mut acc = vec![0.0f64; dim];
    for t in tokens {
        let mut g = Oracle(fnv_oracle(t));
        let v: Vec<f64> = (0..dim)
            .map(|_| 2.0 * ((g.next() >> 11) as f64 / 9007199254740992.0) - 1.0)
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..dim {
            acc[i] += v[i] / n;
        }
    }
    let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    acc.into_iter().map(|x| (x / n) as f32).collect()
}

#[test]
fn mock_embedder_matches_reimplementation() {
    let e = MockEmbedder::new();
    assert_eq!(e.id(), "mock-token-hash-256");
    for text in [
        "Cancer type: breast cancer\nHistology: invasive ductal carcinoma",
        "the and of",
        "EGFR L858R; osimertinib, carboplatin",
        "",
        "Ünïcode tümor",
    ] {
        let got = e.embed_text(text);
        assert_eq!(got.len(), 256);
        assert_eq!(got, oracle_embed(text, 256), "{text:?}");
    }
}

#[test]
fn lexically_similar_texts_are_closer() {
    let e = MockEmbedder::new();
    let a = e.embed_text("metastatic breast cancer HER2 positive trastuzumab");
    let b = e.embed_text("breast cancer HER2 positive after trastuzumab");
    let c = e.embed_text("localized prostate cancer on androgen deprivation");
    let dot = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(p, q)| f64::from(*p) * f64::from(*q)).sum::<f64>();
    assert!(dot(&a, &b) > dot(&a, &c));
    assert_eq!(mock_tokens("The EGFR-mutant"), vec!["egfr", "mutant"]);
}
