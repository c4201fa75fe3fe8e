//! Exact flat top-k search over normalized document embeddings.

use std::path::Path;

use rayon::prelude::*;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::model::{rank_order, RankedList, RankingEntryLine, RankingLine, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub doc_id: String,
    pub similarity: f64,
    /// 1-based.
    pub rank: usize,
}

/// Retrieval result for one query: ranks 1..n, similarity non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub query_id: String,
    pub entries: Vec<PoolEntry>,
}

impl CandidatePool {
    pub fn pool_size(&self) -> usize {
        self.entries.len()
    }

    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.doc_id == doc_id).map(|e| e.rank)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn truncated(&self, len: usize) -> CandidatePool {
        CandidatePool {
            query_id: self.query_id.clone(),
            entries: self.entries.iter().take(len).cloned().collect(),
        }
    }

    pub fn to_ranked_list(&self) -> RankedList {
        RankedList::from_scores(
            self.query_id.clone(),
            self.entries.iter().map(|e| (e.doc_id.clone(), e.similarity)),
            Stage::Retriever,
        )
        .expect("pool entries are unique and finite")
    }

    pub fn from_ranked_list(list: &RankedList) -> CandidatePool {
        CandidatePool {
            query_id: list.query_id.clone(),
            entries: list
                .entries()
                .iter()
                .enumerate()
                .map(|(i, e)| PoolEntry {
                    doc_id: e.doc_id.clone(),
                    similarity: e.score,
                    rank: i + 1,
                })
                .collect(),
        }
    }
}

/// Brute-force inner-product index. Immutable once built.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    docs: EmbeddingMatrix,
}

impl FlatIndex {
    /// The matrix must be non-empty and normalized, so that dot product
    /// orders like cosine similarity.
    pub fn build(docs: EmbeddingMatrix) -> Result<FlatIndex> {
        if docs.is_empty() {
            return Err(Error::invalid("cannot build an index over zero documents"));
        }
        if !docs.is_normalized() {
            return Err(Error::invalid("index requires normalized document embeddings"));
        }
        Ok(FlatIndex { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.docs.dim()
    }

    pub fn documents(&self) -> &EmbeddingMatrix {
        &self.docs
    }

    /// The `k` highest-similarity documents, ties broken by ascending doc id.
    pub fn search_topk(&self, query_id: &str, q: &[f32], k: usize) -> Result<CandidatePool> {
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                id: query_id.to_string(),
                expected: self.dim(),
                found: q.len(),
            });
        }
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!(
                "k = {k} out of range 1..={} for query `{query_id}`",
                self.len()
            )));
        }
        let ids = self.docs.ids();
        let mut scored: Vec<(usize, f64)> = (0..self.len()).map(|i| (i, dot(q, self.docs.row(i)))).collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| rank_order(&ids[a.0], a.1, &ids[b.0], b.1);
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(CandidatePool {
            query_id: query_id.to_string(),
            entries: scored
                .into_iter()
                .enumerate()
                .map(|(r, (i, s))| PoolEntry {
                    doc_id: ids[i].clone(),
                    similarity: s,
                    rank: r + 1,
                })
                .collect(),
        })
    }

    /// Searches every row of `queries`; output order follows `queries`.
    pub fn batch_search(&self, queries: &EmbeddingMatrix, k: usize) -> Result<Vec<CandidatePool>> {
        (0..queries.len())
            .into_par_iter()
            .map(|i| {
                let qid = &queries.ids()[i];
                self.search_topk(qid, queries.row(i), k)
                    .map_err(|e| Error::invalid(format!("query `{qid}`: {e}")))
            })
            .collect()
    }
}

/// Dot product accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn write_pools(path: &Path, pools: &[CandidatePool]) -> Result<()> {
    let lines: Vec<RankingLine> = pools
        .iter()
        .map(|p| RankingLine {
            query_id: p.query_id.clone(),
            stage: None,
            entries: p
                .entries
                .iter()
                .map(|e| RankingEntryLine {
                    doc_id: e.doc_id.clone(),
                    score: e.similarity,
                    rank: e.rank,
                })
                .collect(),
        })
        .collect();
    write_jsonl(path, &lines).map(|_| ())
}

pub fn load_pools(path: &Path) -> Result<Vec<CandidatePool>> {
    let rows: Vec<(usize, RankingLine)> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let mut prev = f64::INFINITY;
        let mut seen = std::collections::HashSet::new();
        for (i, e) in row.entries.iter().enumerate() {
            if e.rank != i + 1 || e.score > prev || !seen.insert(e.doc_id.as_str()) {
                return Err(Error::parse(path, line, format!("malformed pool entry `{}`", e.doc_id)));
            }
            prev = e.score;
        }
        out.push(CandidatePool {
            query_id: row.query_id,
            entries: row
                .entries
                .into_iter()
                .map(|e| PoolEntry {
                    doc_id: e.doc_id,
                    similarity: e.score,
                    rank: e.rank,
                })
                .collect(),
        });
    }
    Ok(out)
}
