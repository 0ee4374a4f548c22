//! Brute-force cosine scan over a [`CorpusStore`].
//!
//! The detector needs the full, unsorted score set, so scoring and top-k
//! selection are deliberately separate passes: [`score_all`] is the O(n*d)
//! scan and [`top_k`] an O(n log k) partial selection that never sorts the
//! score vector.

use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};

/// Minimum corpus size for parallel scoring to be worth the fork.
const PAR_THRESHOLD: usize = 4096;

/// Similarity of one query against every corpus row, aligned to row order.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    scores: Vec<f32>,
    query_norm_ok: bool,
}

impl ScoreVector {
    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// False when the query was the zero vector; all scores are then 0.
    pub fn query_norm_ok(&self) -> bool {
        self.query_norm_ok
    }

    /// Wrap an externally produced score set (statistical calibration,
    /// synthetic studies). Scores are taken as-is, aligned to row order.
    pub fn from_scores(scores: Vec<f32>) -> Self {
        ScoreVector {
            scores,
            query_norm_ok: true,
        }
    }

    #[cfg(test)]
    pub(crate) fn from_raw(scores: Vec<f32>) -> Self {
        Self::from_scores(scores)
    }
}

/// One retrieval hit: document id, corpus row, similarity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub doc_id: String,
    pub row: usize,
    pub score: f32,
}

/// Top-k retrieval output, hits in descending score order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub k: usize,
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn contains(&self, doc_id: &str) -> bool {
        self.hits.iter().any(|h| h.doc_id == doc_id)
    }
}

/// Dot product with a fixed left-to-right accumulation order, so chunked
/// parallel execution over rows is bitwise identical to sequential.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Score `query` against every row of the store. Rows are unit-norm, so
/// for a unit query this is cosine similarity. No sorting is performed.
pub fn score_all(store: &CorpusStore, query: &[f32]) -> Result<ScoreVector> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if query.len() != store.dim() {
        return Err(Error::DimMismatch {
            expected: store.dim(),
            got: query.len(),
        });
    }
    let norm = crate::corpus::l2_norm(query);
    if norm == 0.0 {
        return Ok(ScoreVector {
            scores: vec![0.0; store.len()],
            query_norm_ok: false,
        });
    }
    let emb = store.embeddings();
    let dim = store.dim();
    let data = emb.data();
    let scores: Vec<f32> = if store.len() >= PAR_THRESHOLD {
        data.par_chunks(dim).map(|row| dot(row, query)).collect()
    } else {
        data.chunks(dim).map(|row| dot(row, query)).collect()
    };
    Ok(ScoreVector {
        scores,
        query_norm_ok: true,
    })
}

/// Candidate ordering for the selection heap: higher score wins, ties go
/// to the lower corpus row.
#[derive(PartialEq)]
struct Candidate {
    score: f32,
    row: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // scores are finite by construction
        self.score
            .partial_cmp(&other.score)
            .unwrap()
            .then_with(|| other.row.cmp(&self.row))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Select the `k` highest-scoring non-excluded rows without a full sort.
///
/// `exclude` holds document ids to hide from this request; the store is
/// never mutated. Asking for more rows than remain returns all of them.
pub fn top_k(
    scores: &ScoreVector,
    store: &CorpusStore,
    k: usize,
    exclude: &[&str],
) -> RetrievalResult {
    let excluded_rows: Vec<usize> = exclude.iter().filter_map(|id| store.row_of(id)).collect();
    // min-heap of the best k seen so far (Reverse orders by worst first)
    let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
    for (row, &score) in scores.scores().iter().enumerate() {
        if excluded_rows.contains(&row) {
            continue;
        }
        heap.push(std::cmp::Reverse(Candidate { score, row }));
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut hits: Vec<Hit> = heap
        .into_iter()
        .map(|std::cmp::Reverse(c)| Hit {
            doc_id: store.document(c.row).id.clone(),
            row: c.row,
            score: c.score,
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.row.cmp(&b.row))
    });
    RetrievalResult { k, hits }
}
