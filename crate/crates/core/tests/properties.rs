use proptest::prelude::*;
use trialmatch::datamodel::{read_jsonl, write_jsonl, LoadOptions};
use trialmatch::embedding::{normalize, EmbeddingVector};
use trialmatch::evalkit::{auroc, average_precision, precision};
use trialmatch::index::{IndexedItem, ItemMeta};
use trialmatch::llm::{bindings, parse_decision, render_prompt, TemplateId};
use trialmatch::{assign_split, QueryFilter, Side, Split, TrialSpace, VectorIndex};

fn unit_vectors(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-4i8..=4, dim), n).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let v: Vec<f32> = r.into_iter().map(f32::from).collect();
                normalize(&v).unwrap_or_else(|| {
                    let mut e = vec![0.0; v.len()];
                    e[0] = 1.0;
                    e
                })
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn split_is_a_pure_function_of_the_id(id in "\\PC{1,24}") {
        let a = assign_split(&id).unwrap();
        prop_assert_eq!(a, assign_split(&id).unwrap());
    }

    #[test]
    fn top_k_is_sorted_with_ascending_id_ties(
        vectors in unit_vectors(40, 4),
        query in unit_vectors(1, 4),
        k in 1usize..60,
    ) {
        // Small integer coordinates make exact ties common.
        let items = vectors.iter().enumerate().map(|(i, v)| IndexedItem {
            item_id: format!("id{:03}", (i * 37) % 101),
            side: Side::Patient,
            vector: EmbeddingVector { values: v.clone(), source_hash: String::new() },
            metadata: ItemMeta::patient(chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), Split::Train),
        });
        let index = VectorIndex::build(4, items).unwrap();
        let hits = index.top_k(&query[0], Side::Patient, k, &QueryFilter::default()).unwrap();
        prop_assert_eq!(hits.len(), k.min(40));
        for w in hits.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn per_query_metrics_are_bounded(list in prop::collection::vec(any::<bool>(), 1..40)) {
        let p = precision(&list).unwrap();
        let ap = average_precision(&list).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((0.0..=1.0).contains(&ap));
        if list.iter().all(|r| *r) {
            prop_assert_eq!(ap, 1.0);
        }
    }

    #[test]
    fn auroc_flips_with_labels(
        pairs in prop::collection::vec((0u8..20, any::<bool>()), 2..50)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s) / 20.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + auroc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn last_decision_wins(
        answers in prop::collection::vec(any::<bool>(), 1..8),
        filler in "[a-z ,.]{0,30}",
    ) {
        let text: String = answers
            .iter()
            .map(|a| format!("{filler} {} ", if *a { "Yes!" } else { "No!" }))
            .collect();
        prop_assert_eq!(parse_decision(&text), answers.last().copied());
    }

    #[test]
    fn rendering_substitutes_once(value in "[a-zA-Z {}]{0,40}") {
        let b = bindings([("trial_summary", value.as_str()), ("patient_summary", "{{trial_summary}}")]);
        let m = render_prompt(TemplateId::ReasonableConsideration, &b).unwrap();
        let user = &m[1].content;
        let needle = format!(":\n{}\nHere", value);
        prop_assert!(user.contains(&needle));
        prop_assert!(user.contains("patient:\n{{trial_summary}}Base"));
    }

    #[test]
    fn spaces_round_trip_through_jsonl(
        texts in prop::collection::vec("[ -~]{1,60}", 1..6),
        fields in prop::collection::vec(prop::option::of("[a-z ]{1,20}"), 7),
    ) {
        let spaces: Vec<TrialSpace> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut s = TrialSpace::new("NCT01234567", i as u32 + 1, t.clone());
                for (f, v) in trialmatch::datamodel::SpaceField::ALL.iter().zip(&fields) {
                    s.set_field(*f, v.clone());
                }
                s
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spaces.jsonl");
        write_jsonl(&path, &spaces).unwrap();
        let back: Vec<TrialSpace> = read_jsonl(&path, None, LoadOptions::default()).unwrap();
        prop_assert_eq!(back, spaces);
    }
}
