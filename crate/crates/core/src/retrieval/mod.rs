//! Embedding databases and exact nearest-neighbor search.
//!
//! Stored embeddings are `f32` (the on-disk precision), so an index built
//! in memory and one loaded from an EVDB file answer identically. Search
//! is exact Euclidean kNN with ties broken by ascending sample id.

mod evdb;
mod kdtree;

use rayon::prelude::*;

pub use evdb::{decode_evdb, encode_evdb, read_evdb, write_evdb, EVDB_MAGIC, EVDB_VERSION};

use kdtree::{squared_distance, Candidate, KdTree};

use crate::datamodel::{Pose, Sample};
use crate::diffcore::ParamStore;
use crate::encoders::{embed_sample, EncoderConfig, Modality};
use crate::error::{Error, Result};

/// One stored embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub sample_id: u64,
    pub pose: Pose,
    pub modality: Modality,
    pub ev: Vec<f32>,
}

impl DbEntry {
    pub fn ev_f64(&self) -> Vec<f64> {
        self.ev.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub sample_id: u64,
    pub pose: Pose,
    pub modality: Modality,
    pub distance: f64,
}

/// Ranked hits, ascending by `(distance, sample_id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
    /// Tree nodes inspected by the search.
    pub visited: usize,
}

impl QueryResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.sample_id).collect()
    }
}

/// Immutable KD-tree over database embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingIndex {
    dim: usize,
    entries: Vec<DbEntry>,
    data: Vec<f64>,
    keys: Vec<u64>,
    tree: KdTree,
}

pub fn build_index(entries: Vec<DbEntry>) -> Result<EmbeddingIndex> {
    let first = entries.first().ok_or(Error::Empty("embedding index"))?;
    let dim = first.ev.len();
    if dim == 0 {
        return Err(Error::invalid("embeddings must have length >= 1"));
    }
    if let Some(bad) = entries.iter().find(|e| e.ev.len() != dim) {
        return Err(Error::shape(
            "build_index",
            format!(
                "entry {} has length {}, expected {dim}",
                bad.sample_id,
                bad.ev.len()
            ),
        ));
    }
    let data: Vec<f64> = entries
        .iter()
        .flat_map(|e| e.ev.iter().map(|&v| v as f64))
        .collect();
    let keys = entries.iter().map(|e| e.sample_id).collect();
    let tree = KdTree::build(&data, dim);
    Ok(EmbeddingIndex {
        dim,
        entries,
        data,
        keys,
        tree,
    })
}

impl EmbeddingIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    /// Tree node count (equals the entry count).
    pub fn node_count(&self) -> usize {
        self.tree.len()
    }

    fn check_query(&self, query: &[f64], k: usize) -> Result<()> {
        if k < 1 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if query.len() != self.dim {
            return Err(Error::shape(
                "knn_query",
                format!("query has length {}, index has {}", query.len(), self.dim),
            ));
        }
        Ok(())
    }

    fn to_result(&self, cands: Vec<Candidate>, visited: usize) -> QueryResult {
        let hits = cands
            .into_iter()
            .map(|c| {
                let e = &self.entries[c.point];
                Hit {
                    sample_id: e.sample_id,
                    pose: e.pose,
                    modality: e.modality,
                    distance: c.d2.sqrt(),
                }
            })
            .collect();
        QueryResult { hits, visited }
    }

    /// Exact `k` nearest entries by branch-and-bound search.
    pub fn knn_query(&self, query: &[f64], k: usize) -> Result<QueryResult> {
        self.check_query(query, k)?;
        let (cands, visited) = self.tree.knn(&self.data, self.dim, &self.keys, query, k);
        Ok(self.to_result(cands, visited))
    }

    /// Linear-scan oracle with the same ordering rule.
    pub fn brute_force_query(&self, query: &[f64], k: usize) -> Result<QueryResult> {
        self.check_query(query, k)?;
        let mut all: Vec<Candidate> = (0..self.len())
            .map(|i| Candidate {
                d2: squared_distance(query, &self.data[i * self.dim..(i + 1) * self.dim]),
                key: self.keys[i],
                point: i,
            })
            .collect();
        all.sort();
        all.truncate(k);
        Ok(self.to_result(all, self.len()))
    }
}

/// Embeds `samples` with the encoder of `modality`, in sample order.
pub fn embed_entries(
    samples: &[Sample],
    modality: Modality,
    params: &ParamStore,
    enc: &EncoderConfig,
) -> Result<Vec<DbEntry>> {
    samples
        .par_iter()
        .map(|s| {
            let ev = embed_sample(s, modality, params, enc)?;
            Ok(DbEntry {
                sample_id: s.sample_id,
                pose: s.pose,
                modality,
                ev: ev.values.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect()
}

/// Embeds a database and a query with their own encoders and searches.
#[allow(clippy::too_many_arguments)]
pub fn cross_modal_query(
    db_samples: &[Sample],
    query: &Sample,
    db_modality: Modality,
    query_modality: Modality,
    params: &ParamStore,
    enc: &EncoderConfig,
    k: usize,
) -> Result<QueryResult> {
    let index = build_index(embed_entries(db_samples, db_modality, params, enc)?)?;
    let q = embed_entries(std::slice::from_ref(query), query_modality, params, enc)?;
    index.knn_query(&q[0].ev_f64(), k)
}

#[cfg(test)]
mod tests;
