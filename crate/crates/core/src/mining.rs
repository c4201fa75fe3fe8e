//! Hard-negative mining from retrieved candidate pools.
//!
//! Every strategy starts from the same eligible set: the pool minus the gold
//! document minus the top `exclude_top_m` ranks (likely unlabeled positives).
//! The cluster strategies then filter by K-means cluster membership:
//!
//! | strategy           | candidates                                   |
//! |--------------------|----------------------------------------------|
//! | `ANCE`             | all eligible documents                       |
//! | `CLUSTER_GOLD`     | eligible documents in the gold cluster       |
//! | `CLUSTER_NEAREST`  | eligible documents in the nearest cluster    |
//! | `CLUSTER_NON_GOLD` | eligible documents outside the gold cluster  |
//!
//! Negatives are drawn uniformly without replacement and reported in pool
//! rank order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cluster::{nearest_cluster, ClusteredPool, PoolClustering};
use crate::error::{Error, Result};
use crate::index::CandidatePool;
use crate::io::{read_jsonl, write_json_pretty, write_jsonl};
use crate::seed::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MiningStrategy {
    InBatchExport,
    Ance,
    ClusterGold,
    ClusterNearest,
    ClusterNonGold,
}

impl MiningStrategy {
    pub const ALL: [MiningStrategy; 5] = [
        MiningStrategy::InBatchExport,
        MiningStrategy::Ance,
        MiningStrategy::ClusterGold,
        MiningStrategy::ClusterNearest,
        MiningStrategy::ClusterNonGold,
    ];

    pub fn needs_clustering(self) -> bool {
        matches!(
            self,
            MiningStrategy::ClusterGold | MiningStrategy::ClusterNearest | MiningStrategy::ClusterNonGold
        )
    }

    /// Command-line spelling, e.g. `cluster-non-gold`.
    pub fn cli_name(self) -> &'static str {
        match self {
            MiningStrategy::InBatchExport => "in-batch",
            MiningStrategy::Ance => "ance",
            MiningStrategy::ClusterGold => "cluster-gold",
            MiningStrategy::ClusterNearest => "cluster-nearest",
            MiningStrategy::ClusterNonGold => "cluster-non-gold",
        }
    }
}

impl fmt::Display for MiningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for MiningStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        MiningStrategy::ALL
            .into_iter()
            .find(|m| m.cli_name() == norm || (norm == "in-batch-export" && *m == MiningStrategy::InBatchExport))
            .ok_or_else(|| Error::invalid(format!("unknown mining strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MiningFlag {
    /// Fewer candidates than requested; all of them were returned.
    Shortfall,
    /// The pool could not be clustered; ANCE candidates were used instead.
    Fallback,
}

/// One contrastive training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub query_id: String,
    pub positive_doc_id: String,
    pub negative_doc_ids: Vec<String>,
    pub strategy: MiningStrategy,
    pub seed: u64,
    pub flags: Vec<MiningFlag>,
}

/// Pool entries that may serve as negatives, in rank order.
pub fn eligible_candidates<'a>(pool: &'a CandidatePool, gold: &str, exclude_top_m: usize) -> Vec<&'a str> {
    pool.entries
        .iter()
        .filter(|e| e.rank > exclude_top_m && e.doc_id != gold)
        .map(|e| e.doc_id.as_str())
        .collect()
}

/// Candidate set for `strategy` before sampling.
pub fn strategy_candidates<'a>(
    pool: &'a CandidatePool,
    clustered: Option<&ClusteredPool>,
    gold: &str,
    strategy: MiningStrategy,
    exclude_top_m: usize,
) -> Result<Vec<&'a str>> {
    let eligible = eligible_candidates(pool, gold, exclude_top_m);
    if strategy == MiningStrategy::Ance {
        return Ok(eligible);
    }
    if strategy == MiningStrategy::InBatchExport {
        return Err(Error::invalid("in-batch negatives come from the batch manifest, not the pool"));
    }
    let clustered = clustered.ok_or_else(|| Error::invalid("cluster strategy without a clustering"))?;
    let gold_cluster = clustered.gold_cluster.ok_or_else(|| Error::GoldAbsent {
        query_id: pool.query_id.clone(),
    })?;
    let keep: Box<dyn Fn(usize) -> bool> = match strategy {
        MiningStrategy::ClusterGold => Box::new(move |c| c == gold_cluster),
        MiningStrategy::ClusterNonGold => Box::new(move |c| c != gold_cluster),
        MiningStrategy::ClusterNearest => {
            let near = nearest_cluster(clustered)?;
            Box::new(move |c| c == near)
        }
        MiningStrategy::Ance | MiningStrategy::InBatchExport => unreachable!(),
    };
    eligible
        .into_iter()
        .map(|id| {
            clustered
                .cluster_of(id)
                .map(|c| (id, c))
                .ok_or_else(|| Error::invalid(format!("`{id}` has no cluster assignment")))
        })
        .filter_map(|r| match r {
            Ok((id, c)) if keep(c) => Some(Ok(id)),
            Ok(_) => None,
            Err(e) => Some(Err(e)),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningRequest {
    pub strategy: MiningStrategy,
    pub negatives: usize,
    pub exclude_top_m: usize,
    pub seed: u64,
}

/// Mines negatives for one query.
///
/// Cluster strategies fail with [`Error::GoldAbsent`] when the gold document
/// is not in the pool; callers skip such queries. An unclusterable pool falls
/// back to ANCE and is flagged.
pub fn mine(
    pool: &CandidatePool,
    clustering: Option<&PoolClustering>,
    gold: &str,
    req: &MiningRequest,
) -> Result<TrainingTriple> {
    let mut flags = Vec::new();
    let mut strategy = req.strategy;
    let mut clustered = None;
    if strategy.needs_clustering() {
        if pool.rank_of(gold).is_none() {
            return Err(Error::GoldAbsent {
                query_id: pool.query_id.clone(),
            });
        }
        match clustering {
            Some(PoolClustering::Clustered(c)) => {
                if c.query_id != pool.query_id {
                    return Err(Error::invalid(format!(
                        "clustering for `{}` applied to pool `{}`",
                        c.query_id, pool.query_id
                    )));
                }
                clustered = Some(c);
            }
            Some(PoolClustering::Unclusterable { .. }) => {
                strategy = MiningStrategy::Ance;
                flags.push(MiningFlag::Fallback);
            }
            None => return Err(Error::invalid(format!("no clustering for query `{}`", pool.query_id))),
        }
    }
    let candidates = strategy_candidates(pool, clustered, gold, strategy, req.exclude_top_m)?;
    let negatives: Vec<String> = if candidates.len() < req.negatives {
        flags.push(MiningFlag::Shortfall);
        candidates.iter().map(|s| s.to_string()).collect()
    } else {
        let mut picked: Vec<usize> = (0..candidates.len()).collect();
        let (chosen, _) = picked.partial_shuffle(&mut rng(req.seed), req.negatives);
        chosen.sort_unstable();
        chosen.iter().map(|&i| candidates[i].to_string()).collect()
    };
    Ok(TrainingTriple {
        query_id: pool.query_id.clone(),
        positive_doc_id: gold.to_string(),
        negative_doc_ids: negatives,
        strategy,
        seed: req.seed,
        flags,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExportSummary {
    pub triples: usize,
    pub shortfall: usize,
    pub fallback: usize,
}

impl fmt::Display for ExportSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "exported {} triples (SHORTFALL: {}, FALLBACK: {})",
            self.triples, self.shortfall, self.fallback
        )
    }
}

/// Writes triples as JSONL ordered by query id and prints a one-line summary
/// to standard error.
pub fn export_triples(triples: &[TrainingTriple], path: &Path) -> Result<ExportSummary> {
    let mut sorted: Vec<&TrainingTriple> = triples.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id).then(a.strategy.cmp(&b.strategy)));
    for t in &sorted {
        if t.negative_doc_ids.contains(&t.positive_doc_id) {
            return Err(Error::invalid(format!("query `{}`: positive listed as a negative", t.query_id)));
        }
    }
    write_jsonl(path, sorted.iter().copied())?;
    let summary = ExportSummary {
        triples: sorted.len(),
        shortfall: sorted.iter().filter(|t| t.flags.contains(&MiningFlag::Shortfall)).count(),
        fallback: sorted.iter().filter(|t| t.flags.contains(&MiningFlag::Fallback)).count(),
    };
    eprintln!("{summary} -> {}", path.display());
    Ok(summary)
}

pub fn load_triples(path: &Path) -> Result<Vec<TrainingTriple>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, t)| t).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub index: usize,
    pub query_ids: Vec<String>,
    pub in_batch_negatives: usize,
    /// Single-query batch: no in-batch negatives at all.
    pub degenerate: bool,
}

/// Batch assignment for in-batch negatives, consumed by an external trainer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InBatchManifest {
    pub strategy: MiningStrategy,
    pub batch_size: usize,
    pub seed: u64,
    pub n_queries: usize,
    /// Negatives each query receives in a full batch (`batch_size - 1`).
    pub in_batch_negatives_per_query: usize,
    pub batches: Vec<Batch>,
}

pub fn inbatch_manifest<S: AsRef<str>>(query_ids: &[S], batch_size: usize, seed: u64) -> Result<InBatchManifest> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch size {batch_size} < 2")));
    }
    let mut ids: Vec<String> = query_ids.iter().map(|s| s.as_ref().to_string()).collect();
    ids.sort();
    ids.dedup();
    ids.shuffle(&mut rng(seed));
    let batches = ids
        .chunks(batch_size)
        .enumerate()
        .map(|(index, chunk)| Batch {
            index,
            query_ids: chunk.to_vec(),
            in_batch_negatives: chunk.len() - 1,
            degenerate: chunk.len() == 1,
        })
        .collect();
    Ok(InBatchManifest {
        strategy: MiningStrategy::InBatchExport,
        batch_size,
        seed,
        n_queries: ids.len(),
        in_batch_negatives_per_query: batch_size - 1,
        batches,
    })
}

pub fn export_inbatch_manifest<S: AsRef<str>>(
    query_ids: &[S],
    batch_size: usize,
    seed: u64,
    path: &Path,
) -> Result<InBatchManifest> {
    let m = inbatch_manifest(query_ids, batch_size, seed)?;
    write_json_pretty(path, &m)?;
    Ok(m)
}

/// Counts triples per flag, for run summaries.
pub fn flag_counts(triples: &[TrainingTriple]) -> BTreeMap<MiningFlag, usize> {
    let mut out = BTreeMap::new();
    for f in triples.iter().flat_map(|t| &t.flags) {
        *out.entry(*f).or_insert(0) += 1;
    }
    out
}
