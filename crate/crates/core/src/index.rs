//! Exact cosine top-k retrieval over patient and space vectors.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{OpenWindow, Split};
use crate::embedding::{dot, ByteReader, EmbeddingVector};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate {side:?} item {id}")]
    Conflict { side: Side, id: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("index file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Patient,
    Space,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nct_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub close_date: Option<NaiveDate>,
}

impl ItemMeta {
    pub fn patient(anchor_date: NaiveDate, split: Split) -> Self {
        Self {
            anchor_date: Some(anchor_date),
            split: Some(split),
            ..Self::default()
        }
    }

    pub fn space(nct_id: &str, window: OpenWindow) -> Self {
        Self {
            nct_id: Some(nct_id.to_string()),
            open_date: Some(window.open_date),
            close_date: window.close_date,
            ..Self::default()
        }
    }

    pub fn window(&self) -> Option<OpenWindow> {
        Some(OpenWindow {
            open_date: self.open_date?,
            close_date: self.close_date,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedItem {
    pub item_id: String,
    pub side: Side,
    pub vector: EmbeddingVector,
    pub metadata: ItemMeta,
}

/// True iff the space's trial was open on `as_of`; both bounds inclusive.
pub fn temporal_pass(meta: &ItemMeta, as_of: NaiveDate) -> Result<bool, IndexError> {
    meta.window()
        .map(|w| w.contains(as_of))
        .ok_or_else(|| IndexError::Contract("item has no open window".into()))
}

/// Conjunction of optional predicates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFilter {
    /// Spaces only: keep trials open on this date.
    #[serde(default)]
    pub temporal_as_of: Option<NaiveDate>,
    /// Keep items whose split is listed; items without a split fail.
    #[serde(default)]
    pub split_in: Option<BTreeSet<Split>>,
    /// Drop items belonging to these trials.
    #[serde(default)]
    pub nct_exclude: Option<BTreeSet<String>>,
    /// Patients only: keep summaries anchored inside this window.
    #[serde(default)]
    pub anchor_within: Option<OpenWindow>,
}

impl QueryFilter {
    pub fn accepts(&self, side: Side, meta: &ItemMeta) -> Result<bool, IndexError> {
        if let (Some(as_of), Side::Space) = (self.temporal_as_of, side) {
            if !temporal_pass(meta, as_of)? {
                return Ok(false);
            }
        }
        if let Some(splits) = &self.split_in {
            if !meta.split.is_some_and(|s| splits.contains(&s)) {
                return Ok(false);
            }
        }
        if let (Some(excluded), Some(nct)) = (&self.nct_exclude, &meta.nct_id) {
            if excluded.contains(nct) {
                return Ok(false);
            }
        }
        if let (Some(window), Side::Patient) = (&self.anchor_within, side) {
            match meta.anchor_date {
                Some(d) if window.contains(d) => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Default)]
struct SideStore {
    ids: Vec<String>,
    meta: Vec<ItemMeta>,
    matrix: Vec<f32>,
    positions: HashMap<String, usize>,
}

/// Immutable-after-build collection of vectors for both sides.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dimension: usize,
    patients: SideStore,
    spaces: SideStore,
}

const PARALLEL_SCAN_MIN: usize = 4096;

impl VectorIndex {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            patients: SideStore::default(),
            spaces: SideStore::default(),
        }
    }

    pub fn build(dimension: usize, items: impl IntoIterator<Item = IndexedItem>) -> Result<Self, IndexError> {
        let mut index = Self::new(dimension);
        for item in items {
            index.add(item)?;
        }
        Ok(index)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn store(&self, side: Side) -> &SideStore {
        match side {
            Side::Patient => &self.patients,
            Side::Space => &self.spaces,
        }
    }

    pub fn add(&mut self, item: IndexedItem) -> Result<(), IndexError> {
        if item.vector.values.len() != self.dimension {
            return Err(IndexError::InvalidArgument(format!(
                "item {} has dimension {}, index has {}",
                item.item_id,
                item.vector.values.len(),
                self.dimension
            )));
        }
        let m = &item.metadata;
        let ok = match item.side {
            Side::Patient => m.anchor_date.is_some() && m.split.is_some(),
            Side::Space => m.nct_id.is_some() && m.open_date.is_some(),
        };
        if !ok {
            return Err(IndexError::Contract(format!(
                "item {} lacks {:?}-side metadata",
                item.item_id, item.side
            )));
        }
        let store = match item.side {
            Side::Patient => &mut self.patients,
            Side::Space => &mut self.spaces,
        };
        if store.positions.contains_key(&item.item_id) {
            return Err(IndexError::Conflict {
                side: item.side,
                id: item.item_id,
            });
        }
        store.positions.insert(item.item_id.clone(), store.ids.len());
        store.ids.push(item.item_id);
        store.meta.push(item.metadata);
        store.matrix.extend_from_slice(&item.vector.values);
        Ok(())
    }

    pub fn len(&self, side: Side) -> usize {
        self.store(side).ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.ids.is_empty() && self.spaces.ids.is_empty()
    }

    /// Item ids of one side in insertion order.
    pub fn ids(&self, side: Side) -> &[String] {
        &self.store(side).ids
    }

    pub fn get(&self, side: Side, id: &str) -> Option<(&ItemMeta, &[f32])> {
        let store = self.store(side);
        let i = *store.positions.get(id)?;
        Some((&store.meta[i], &store.matrix[i * self.dimension..(i + 1) * self.dimension]))
    }

    /// The `k` best items by cosine among those passing `filter`, in descending
    /// score order with ties broken by ascending item id.
    pub fn top_k(
        &self,
        query: &[f32],
        side: Side,
        k: usize,
        filter: &QueryFilter,
    ) -> Result<Vec<(String, f64)>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidArgument("k must be at least 1".into()));
        }
        if query.len() != self.dimension {
            return Err(IndexError::InvalidArgument(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dimension
            )));
        }
        let store = self.store(side);
        let d = self.dimension;
        let score = |i: usize| -> Result<Option<(f64, usize)>, IndexError> {
            if !filter.accepts(side, &store.meta[i])? {
                return Ok(None);
            }
            Ok(Some((dot(query, &store.matrix[i * d..(i + 1) * d]), i)))
        };
        let n = store.ids.len();
        let scored: Vec<Option<(f64, usize)>> = if n >= PARALLEL_SCAN_MIN {
            (0..n).into_par_iter().map(score).collect::<Result<_, _>>()?
        } else {
            (0..n).map(score).collect::<Result<_, _>>()?
        };
        let mut hits: Vec<(f64, usize)> = scored.into_iter().flatten().collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| store.ids[a.1].cmp(&store.ids[b.1]))
        };
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        Ok(hits
            .into_iter()
            .map(|(s, i)| (store.ids[i].clone(), s))
            .collect())
    }

    /// Persists the index: magic `TMIX`, version byte, dimension (u32 LE), patient
    /// and space counts (u64 LE each), then patient records followed by space
    /// records. A record is the id (u32 LE length + UTF-8), the metadata as JSON
    /// (u32 LE length + UTF-8) and `dimension` f32 LE values.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.push(INDEX_VERSION);
        buf.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        buf.extend_from_slice(&(self.patients.ids.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.spaces.ids.len() as u64).to_le_bytes());
        for store in [&self.patients, &self.spaces] {
            for (i, id) in store.ids.iter().enumerate() {
                let meta = serde_json::to_vec(&store.meta[i]).expect("metadata serializes");
                buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
                buf.extend_from_slice(id.as_bytes());
                buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
                buf.extend_from_slice(&meta);
                for v in &store.matrix[i * self.dimension..(i + 1) * self.dimension] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let io = |e: std::io::Error| IndexError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, buf).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let err = |message: String| IndexError::Io {
            path: path.display().to_string(),
            message,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        let truncated = || err("truncated file".into());
        if r.take(4).ok_or_else(truncated)? != INDEX_MAGIC {
            return Err(err("bad magic".into()));
        }
        let version = r.take(1).ok_or_else(truncated)?[0];
        if version != INDEX_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let dimension = r.u32().ok_or_else(truncated)? as usize;
        let counts = [r.u64().ok_or_else(truncated)?, r.u64().ok_or_else(truncated)?];
        let mut index = Self::new(dimension);
        for (side, count) in [Side::Patient, Side::Space].into_iter().zip(counts) {
            for _ in 0..count {
                let id_len = r.u32().ok_or_else(truncated)? as usize;
                let id = std::str::from_utf8(r.take(id_len).ok_or_else(truncated)?)
                    .map_err(|_| err("id is not UTF-8".into()))?
                    .to_string();
                let meta_len = r.u32().ok_or_else(truncated)? as usize;
                let metadata: ItemMeta = serde_json::from_slice(r.take(meta_len).ok_or_else(truncated)?)
                    .map_err(|e| err(format!("metadata of {id}: {e}")))?;
                let values = (0..dimension)
                    .map(|_| r.f32().ok_or_else(truncated))
                    .collect::<Result<Vec<f32>, _>>()?;
                index.add(IndexedItem {
                    item_id: id,
                    side,
                    vector: EmbeddingVector {
                        values,
                        source_hash: String::new(),
                    },
                    metadata,
                })?;
            }
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes".into()));
        }
        Ok(index)
    }
}

const INDEX_MAGIC: &[u8; 4] = b"TMIX";
const INDEX_VERSION: u8 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn space(id: &str, v: Vec<f32>) -> IndexedItem {
        IndexedItem {
            item_id: id.into(),
            side: Side::Space,
            vector: EmbeddingVector { values: v, source_hash: String::new() },
            metadata: ItemMeta::space("NCT00000001", OpenWindow { open_date: d(2020, 1, 1), close_date: Some(d(2020, 12, 31)) }),
        }
    }

    #[test]
    fn inclusive_window() {
        let m = ItemMeta::space("NCT00000001", OpenWindow { open_date: d(2020, 1, 1), close_date: Some(d(2020, 12, 31)) });
        assert!(temporal_pass(&m, d(2020, 1, 1)).unwrap());
        assert!(temporal_pass(&m, d(2020, 12, 31)).unwrap());
        assert!(!temporal_pass(&m, d(2021, 1, 1)).unwrap());
        assert!(temporal_pass(&ItemMeta::default(), d(2020, 1, 1)).is_err());
    }

    #[test]
    fn ties_by_id_and_conflicts() {
        let mut idx = VectorIndex::new(2);
        idx.add(space("b", vec![1.0, 0.0])).unwrap();
        idx.add(space("a", vec![1.0, 0.0])).unwrap();
        idx.add(space("c", vec![0.0, 1.0])).unwrap();
        assert!(matches!(idx.add(space("a", vec![1.0, 0.0])), Err(IndexError::Conflict { .. })));
        let hits = idx.top_k(&[1.0, 0.0], Side::Space, 2, &QueryFilter::default()).unwrap();
        assert_eq!(hits.iter().map(|h| h.0.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
        assert!(idx.top_k(&[1.0], Side::Space, 1, &QueryFilter::default()).is_err());
        assert!(idx.top_k(&[1.0, 0.0], Side::Patient, 3, &QueryFilter::default()).unwrap().is_empty());
    }
}
