use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialmatch::embedding::{normalize, EmbeddingVector};
use trialmatch::index::{temporal_pass, IndexedItem, ItemMeta};
use trialmatch::{OpenWindow, QueryFilter, Side, Split, VectorIndex};

const DIM: usize = 16;

fn base() -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 1, 1).unwrap()
}

fn day(n: u64) -> NaiveDate {
    base().checked_add_days(Days::new(n)).unwrap()
}

fn random_window(rng: &mut ChaCha8Rng) -> OpenWindow {
    let open = rng.gen_range(0..3000);
    let close = if rng.gen_bool(0.3) { None } else { Some(day(open + rng.gen_range(0..800))) };
    OpenWindow {
        open_date: day(open),
        close_date: close,
    }
}

fn oracle(w: &OpenWindow, d: NaiveDate) -> bool {
    let after_open = d >= w.open_date;
    let before_close = match w.close_date {
        Some(c) => d <= c,
        None => true,
    };
    after_open && before_close
}

fn vector(rng: &mut ChaCha8Rng) -> EmbeddingVector {
    let raw: Vec<f32> = (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    EmbeddingVector {
        values: normalize(&raw).unwrap(),
        source_hash: String::new(),
    }
}

#[test]
fn window_predicate_matches_oracle_on_random_cases() {
    check_window_predicate_matches_oracle_on_random_cases();
}

pub fn check_window_predicate_matches_oracle_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10_000 {
        let w = random_window(&mut rng);
        // Dates cluster near the bounds so boundary days are common.
        let d = match rng.gen_range(0..4) {
            0 => w.open_date,
            1 => w.close_date.unwrap_or(w.open_date),
            2 => w.open_date.pred_opt().unwrap(),
            _ => day(rng.gen_range(0..4000)),
        };
        let meta = ItemMeta::space("NCT00000001", w);
        assert_eq!(temporal_pass(&meta, d).unwrap(), oracle(&w, d));
        assert_eq!(w.contains(d), oracle(&w, d));
    }
}

#[test]
fn no_retrieved_space_violates_the_window() {
    check_no_retrieved_space_violates_the_window();
}

pub fn check_no_retrieved_space_violates_the_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let windows: Vec<OpenWindow> = (0..300).map(|_| random_window(&mut rng)).collect();
    let items = windows.iter().enumerate().map(|(i, w)| IndexedItem {
        item_id: format!("NCT{:08}#1", i),
        side: Side::Space,
        vector: vector(&mut rng),
        metadata: ItemMeta::space(&format!("NCT{:08}", i), *w),
    });
    let index = VectorIndex::build(DIM, items).unwrap();
    let mut violations = 0;
    for _ in 0..10_000 {
        let d = day(rng.gen_range(0..4000));
        let filter = QueryFilter {
            temporal_as_of: Some(d),
            ..QueryFilter::default()
        };
        let q = vector(&mut rng);
        let k = rng.gen_range(1..=400);
        let hits = index.top_k(&q.values, Side::Space, k, &filter).unwrap();
        for (id, _) in &hits {
            let i: usize = id[3..11].parse().unwrap();
            if !oracle(&windows[i], d) {
                violations += 1;
            }
        }
        let eligible = windows.iter().filter(|w| oracle(w, d)).count();
        assert_eq!(hits.len(), eligible.min(k));
    }
    assert_eq!(violations, 0);
}

#[test]
fn patient_side_uses_anchor_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let anchors: Vec<NaiveDate> = (0..200).map(|_| day(rng.gen_range(0..4000))).collect();
    let items = anchors.iter().enumerate().map(|(i, a)| IndexedItem {
        item_id: format!("P{i:04}"),
        side: Side::Patient,
        vector: vector(&mut rng),
        metadata: ItemMeta::patient(*a, Split::Test),
    });
    let index = VectorIndex::build(DIM, items).unwrap();
    for _ in 0..1000 {
        let w = random_window(&mut rng);
        let filter = QueryFilter {
            anchor_within: Some(w),
            ..QueryFilter::default()
        };
        let q = vector(&mut rng);
        let hits = index.top_k(&q.values, Side::Patient, 200, &filter).unwrap();
        let want = anchors.iter().filter(|a| oracle(&w, **a)).count();
        assert_eq!(hits.len(), want);
        for (id, _) in hits {
            let i: usize = id[1..].parse().unwrap();
            assert!(oracle(&w, anchors[i]));
        }
    }
}

#[test]
fn temporal_filter_on_space_without_window_is_a_contract_error() {
    let meta = ItemMeta::default();
    assert!(temporal_pass(&meta, base()).is_err());
}
