//! Stages of a run and the manifest that records them.
//!
//! Each stage is a plain function over in-memory data; [`Manifest`] wraps
//! them with input/output digests and timestamps so a run directory can be
//! audited and any stage re-executed from the manifest alone.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{cluster_pool, KRange, PoolClustering};
use crate::config::RunConfig;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::eval::{agreement_report, evaluate, write_report_json, write_report_tsv, EvalReport};
use crate::index::{write_pools, CandidatePool, FlatIndex};
use crate::io::{file_digest, read_jsonl, write_json_pretty, write_jsonl};
use crate::judge::{run_judge, JudgeBackend, JudgeRun, JudgeStats};
use crate::mining::{mine, MiningRequest, MiningStrategy, TrainingTriple};
use crate::model::{write_rankings, Collection, QuerySet, RankedList, Stage};
use crate::seed::derive_seed;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

fn missing_from(m: &EmbeddingMatrix, ids: impl Iterator<Item = impl AsRef<str>>) -> Vec<String> {
    ids.filter(|id| m.get(id.as_ref()).is_none())
        .map(|id| id.as_ref().to_string())
        .collect()
}

/// Aligns and normalizes both embedding sets, checks every id is covered and
/// returns the document matrix in collection order with the per-query pools.
///
/// Pools are clipped to the collection size when it is smaller than
/// `pool_size`.
pub fn retrieve(
    collection: &Collection,
    queries: &QuerySet,
    doc_vectors: &EmbeddingMatrix,
    query_vectors: &EmbeddingMatrix,
    pool_size: usize,
) -> Result<(EmbeddingMatrix, Vec<CandidatePool>)> {
    queries.validate_against(collection)?;
    let mut missing = missing_from(doc_vectors, collection.ids());
    missing.extend(missing_from(query_vectors, queries.queries.iter().map(|q| q.query_id.as_str())));
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let doc_ids: Vec<&str> = collection.ids().collect();
    let docs = doc_vectors.align(&doc_ids)?.normalize()?;
    let query_ids: Vec<&str> = queries.queries.iter().map(|q| q.query_id.as_str()).collect();
    let qs = query_vectors.align(&query_ids)?.normalize()?;
    let index = FlatIndex::build(docs)?;
    if pool_size == 0 {
        return Err(Error::invalid("pool size must be positive"));
    }
    let k = pool_size.min(index.len());
    if k < pool_size {
        log::warn!(
            "collection has {} documents; pools clipped from {pool_size} to {k}",
            index.len()
        );
    }
    let pools = index.batch_search(&qs, k)?;
    Ok((index.documents().clone(), pools))
}

/// Clusters every pool in retriever space. Each query gets its own derived
/// seed so the result does not depend on scheduling.
pub fn cluster_pools(
    pools: &[CandidatePool],
    docs: &EmbeddingMatrix,
    golds: &BTreeMap<String, Option<String>>,
    range: KRange,
    seed: u64,
) -> Result<Vec<PoolClustering>> {
    pools
        .par_iter()
        .map(|p| {
            let gold = golds.get(&p.query_id).and_then(|g| g.as_deref());
            cluster_pool(p, docs, gold, range, derive_seed(seed, "cluster", &p.query_id))
        })
        .collect()
}

/// A query that produced no triple, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct MiningRun {
    pub triples: Vec<TrainingTriple>,
    pub skipped: Vec<Skipped>,
}

/// Mines one triple per labelled query. Queries without a gold label, and
/// cluster-strategy queries whose gold is not in the pool, are skipped.
pub fn mine_pools(
    pools: &[CandidatePool],
    clusterings: Option<&[PoolClustering]>,
    golds: &BTreeMap<String, Option<String>>,
    strategy: MiningStrategy,
    negatives: usize,
    exclude_top_m: usize,
    seed: u64,
) -> Result<MiningRun> {
    if strategy == MiningStrategy::InBatchExport {
        return Err(Error::invalid("in-batch negatives are exported as a batch manifest, not mined"));
    }
    let by_query: HashMap<&str, &PoolClustering> = clusterings
        .unwrap_or_default()
        .iter()
        .map(|c| (c.query_id(), c))
        .collect();
    let purpose = format!("mine:{}", strategy.cli_name());
    let mut out = MiningRun::default();
    for pool in pools {
        let Some(gold) = golds.get(&pool.query_id).and_then(|g| g.as_deref()) else {
            out.skipped.push(Skipped {
                query_id: pool.query_id.clone(),
                reason: "no gold label".into(),
            });
            continue;
        };
        let req = MiningRequest {
            strategy,
            negatives,
            exclude_top_m,
            seed: derive_seed(seed, &purpose, &pool.query_id),
        };
        match mine(pool, by_query.get(pool.query_id.as_str()).copied(), gold, &req) {
            Ok(t) => out.triples.push(t),
            Err(e @ Error::GoldAbsent { .. }) => out.skipped.push(Skipped {
                query_id: pool.query_id.clone(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Reranker scores keyed by query, then document.
pub type RerankScores = BTreeMap<String, BTreeMap<String, f64>>;

/// Reads a `query_id\tdoc_id\tscore` TSV with that header.
pub fn load_rerank_scores(path: &Path) -> Result<RerankScores> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "empty file; expected header `query_id\tdoc_id\tscore`")),
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').map(str::trim).collect();
    if cols != ["query_id", "doc_id", "score"] {
        return Err(Error::parse(path, 1, format!("expected header `query_id\tdoc_id\tscore`, found `{header}`")));
    }
    let mut out = RerankScores::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [q, d, s] = fields[..] else {
            return Err(Error::parse(path, line_no, format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let score: f64 = s
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::parse(path, line_no, format!("score `{s}` is not a finite number")))?;
        let (q, d) = (q.trim().to_string(), d.trim().to_string());
        if out.entry(q.clone()).or_default().insert(d.clone(), score).is_some() {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id: format!("{q}/{d}"),
            });
        }
    }
    Ok(out)
}

/// Builds reranker lists over the top `rerank_pool` documents of each pool.
/// Every pooled document needs a score; scores for documents outside the
/// rerank pool are ignored.
pub fn rerank_lists(pools: &[CandidatePool], scores: &RerankScores, rerank_pool: usize) -> Result<Vec<RankedList>> {
    let mut missing = Vec::new();
    let mut lists = Vec::with_capacity(pools.len());
    for pool in pools {
        let scored = scores.get(&pool.query_id);
        let mut pairs = Vec::new();
        for doc in pool.truncated(rerank_pool).doc_ids() {
            match scored.and_then(|s| s.get(doc)) {
                Some(&v) => pairs.push((doc.to_string(), v)),
                None => missing.push(format!("{}/{doc}", pool.query_id)),
            }
        }
        if missing.is_empty() {
            lists.push(RankedList::from_scores(pool.query_id.clone(), pairs, Stage::Reranker)?);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let pooled: std::collections::HashSet<&str> = pools.iter().map(|p| p.query_id.as_str()).collect();
    let extra = scores.keys().filter(|q| !pooled.contains(q.as_str())).count();
    if extra > 0 {
        log::warn!("ignored reranker scores for {extra} queries without a pool");
    }
    Ok(lists)
}

/// Report for `lists`, with an agreement block when `retriever` is given.
pub fn evaluate_stage(
    lists: &[RankedList],
    retriever: Option<&[RankedList]>,
    queries: &QuerySet,
    ks: &[usize],
) -> Result<EvalReport> {
    let mut report = evaluate(lists, queries, ks)?;
    if let Some(ret) = retriever {
        report.agreement = Some(agreement_report(ret, lists, &queries.golds())?);
    }
    Ok(report)
}

pub fn write_transcript(path: &Path, run: &JudgeRun) -> Result<()> {
    write_jsonl(path, &run.transcript).map(|_| ())
}

pub fn load_transcript(path: &Path) -> Result<Vec<crate::judge::TranscriptEntry>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, t)| t).collect())
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    /// Stage-specific parameters, e.g. the mining strategy.
    pub args: BTreeMap<String, serde_json::Value>,
    pub inputs: BTreeMap<String, FileRecord>,
    pub outputs: BTreeMap<String, FileRecord>,
    /// The configuration in effect, after command-line overrides.
    pub config: RunConfig,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_path: Option<PathBuf>,
    /// The configuration file exactly as read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_snapshot: Option<String>,
    pub stages: Vec<StageRecord>,
}

/// What a stage reads and writes, declared before it runs.
#[derive(Debug, Clone, Default)]
pub struct StageSpec {
    pub name: String,
    pub args: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
}

impl StageSpec {
    pub fn new(name: &str) -> StageSpec {
        StageSpec {
            name: name.to_string(),
            ..StageSpec::default()
        }
    }

    pub fn arg(mut self, key: &str, value: impl Serialize) -> StageSpec {
        self.args
            .insert(key.to_string(), serde_json::to_value(value).expect("arg serializes"));
        self
    }

    pub fn input(mut self, role: &str, path: impl Into<PathBuf>) -> StageSpec {
        self.inputs.push((role.to_string(), path.into()));
        self
    }

    pub fn output(mut self, role: &str, path: impl Into<PathBuf>) -> StageSpec {
        self.outputs.push((role.to_string(), path.into()));
        self
    }
}

/// A manifest file being appended to.
#[derive(Debug, Clone)]
pub struct Manifest {
    path: PathBuf,
    pub record: RunManifest,
}

impl Manifest {
    /// Opens `path` if it exists, otherwise starts a new run. An existing
    /// manifest must have been created from the same configuration file.
    pub fn open(path: &Path, config: Option<(&Path, &str)>) -> Result<Manifest> {
        let snapshot = config.map(|(_, text)| text.to_string());
        if path.exists() {
            let text = crate::io::read_text(path)?;
            let record: RunManifest = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
            if snapshot.is_some() && record.config_snapshot != snapshot {
                return Err(Error::Config(format!(
                    "{} belongs to run {} with a different configuration file",
                    path.display(),
                    record.run_id
                )));
            }
            return Ok(Manifest {
                path: path.to_path_buf(),
                record,
            });
        }
        let mut h = Sha256::new();
        h.update(TOOL_VERSION.as_bytes());
        h.update(snapshot.as_deref().unwrap_or("").as_bytes());
        h.update(unix_ms().to_le_bytes());
        let run_id = hex::encode(&h.finalize()[..8]);
        Ok(Manifest {
            path: path.to_path_buf(),
            record: RunManifest {
                run_id,
                tool_version: TOOL_VERSION.to_string(),
                config_path: config.map(|(p, _)| p.to_path_buf()),
                config_snapshot: snapshot,
                stages: Vec::new(),
            },
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn completed(&self) -> impl Iterator<Item = &StageRecord> {
        self.record.stages.iter().filter(|s| s.status == StageStatus::Completed)
    }

    pub fn save(&self) -> Result<()> {
        write_json_pretty(&self.path, &self.record)
    }

    /// Digests inputs, runs `body`, digests outputs and appends a stage
    /// record. The manifest is saved whether or not the stage succeeds.
    pub fn run_stage<T>(&mut self, spec: StageSpec, config: &RunConfig, body: impl FnOnce() -> Result<T>) -> Result<T> {
        let started = unix_ms();
        let digest_all = |files: &[(String, PathBuf)]| -> Result<BTreeMap<String, FileRecord>> {
            files
                .iter()
                .map(|(role, p)| {
                    Ok((
                        role.clone(),
                        FileRecord {
                            path: p.clone(),
                            sha256: file_digest(p)?,
                        },
                    ))
                })
                .collect()
        };
        let result = digest_all(&spec.inputs).and_then(|inputs| {
            let value = body()?;
            Ok((inputs, value))
        });
        let (status, inputs, outputs, error, value) = match result {
            Ok((inputs, value)) => match digest_all(&spec.outputs) {
                Ok(outputs) => (StageStatus::Completed, inputs, outputs, None, Ok(value)),
                Err(e) => (StageStatus::Failed, inputs, BTreeMap::new(), Some(e.to_string()), Err(e)),
            },
            Err(e) => (StageStatus::Failed, BTreeMap::new(), BTreeMap::new(), Some(e.to_string()), Err(e)),
        };
        self.record.stages.push(StageRecord {
            stage: spec.name,
            status,
            args: spec.args,
            inputs,
            outputs,
            config: config.clone(),
            started_unix_ms: started,
            finished_unix_ms: unix_ms(),
            error,
        });
        self.save()?;
        value
    }
}

/// Input files for a full run.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub collection: PathBuf,
    pub queries: PathBuf,
    pub doc_embeddings: PathBuf,
    pub query_embeddings: PathBuf,
    pub embedding_format: crate::embedding::EmbeddingFormat,
    pub rerank_scores: PathBuf,
}

/// File names written into the output directory of a full run.
pub mod outputs {
    pub const POOLS: &str = "pools.jsonl";
    pub const RERANKER: &str = "reranker.jsonl";
    pub const FINAL: &str = "final.jsonl";
    pub const TRANSCRIPT: &str = "transcript.jsonl";
    pub const JUDGE_STATS: &str = "judge_stats.json";
    pub const MANIFEST: &str = "manifest.json";

    /// `report_<stage>.json` and `report_<stage>.tsv`.
    pub fn report(stage: &str) -> (String, String) {
        (format!("report_{stage}.json"), format!("report_{stage}.tsv"))
    }
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub retriever: EvalReport,
    pub reranker: EvalReport,
    pub final_report: EvalReport,
    pub judge: JudgeStats,
    pub manifest: PathBuf,
}

/// retrieve → ingest reranker scores → judge → evaluate, each stage recorded
/// in `out_dir/manifest.json`.
pub fn run_pipeline(
    inputs: &PipelineInputs,
    config: &RunConfig,
    config_file: Option<(&Path, &str)>,
    backend: &dyn JudgeBackend,
    out_dir: &Path,
) -> Result<PipelineSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::open(&out_dir.join(outputs::MANIFEST), config_file)?;
    let out = |name: &str| out_dir.join(name);

    let collection = crate::model::load_collection(&inputs.collection)?;
    let queries = crate::model::load_queries(&inputs.queries)?;

    let spec = StageSpec::new("retrieve")
        .arg("pool_size", config.pool_size_retrieve)
        .arg("embedding_format", format!("{:?}", inputs.embedding_format).to_lowercase())
        .input("collection", &inputs.collection)
        .input("queries", &inputs.queries)
        .input("doc_embeddings", &inputs.doc_embeddings)
        .input("query_embeddings", &inputs.query_embeddings)
        .output("pools", out(outputs::POOLS));
    let pools = manifest.run_stage(spec, config, || {
        let docs = crate::embedding::load_embeddings(&inputs.doc_embeddings, inputs.embedding_format)?;
        let qs = crate::embedding::load_embeddings(&inputs.query_embeddings, inputs.embedding_format)?;
        let (_, pools) = retrieve(&collection, &queries, &docs, &qs, config.pool_size_retrieve)?;
        write_pools(&out(outputs::POOLS), &pools)?;
        Ok(pools)
    })?;
    let retriever: Vec<RankedList> = pools.iter().map(CandidatePool::to_ranked_list).collect();

    let spec = StageSpec::new("rerank")
        .arg("pool_size", config.pool_size_rerank)
        .input("pools", out(outputs::POOLS))
        .input("scores", &inputs.rerank_scores)
        .output("reranker", out(outputs::RERANKER));
    let reranker = manifest.run_stage(spec, config, || {
        let scores = load_rerank_scores(&inputs.rerank_scores)?;
        let lists = rerank_lists(&pools, &scores, config.pool_size_rerank)?;
        write_rankings(&out(outputs::RERANKER), &lists)?;
        Ok(lists)
    })?;

    let spec = StageSpec::new("judge")
        .arg("formulation", config.formulation)
        .arg("judge_candidates", config.judge_candidates)
        .input("collection", &inputs.collection)
        .input("queries", &inputs.queries)
        .input("retriever", out(outputs::POOLS))
        .input("reranker", out(outputs::RERANKER))
        .output("final", out(outputs::FINAL))
        .output("transcript", out(outputs::TRANSCRIPT))
        .output("stats", out(outputs::JUDGE_STATS));
    let judged = manifest.run_stage(spec, config, || {
        let run = run_judge(
            &retriever,
            &reranker,
            &queries,
            &collection,
            &config.judge_settings(),
            backend,
            config.judge.max_in_flight,
        )?;
        write_rankings(&out(outputs::FINAL), &run.finals)?;
        write_transcript(&out(outputs::TRANSCRIPT), &run)?;
        write_json_pretty(&out(outputs::JUDGE_STATS), &run.stats)?;
        Ok(run)
    })?;

    let mut reports = Vec::new();
    for (stage, lists, input, against) in [
        ("retriever", &retriever, outputs::POOLS, None),
        ("reranker", &reranker, outputs::RERANKER, Some(&retriever)),
        ("final", &judged.finals, outputs::FINAL, None),
    ] {
        let (json, tsv) = outputs::report(stage);
        let spec = StageSpec::new("evaluate")
            .arg("rankings", stage)
            .arg("recall_ks", &config.recall_ks)
            .input("queries", &inputs.queries)
            .input("rankings", out(input))
            .output("report_json", out(&json))
            .output("report_tsv", out(&tsv));
        let report = manifest.run_stage(spec, config, || {
            let report = evaluate_stage(lists, against.map(Vec::as_slice), &queries, &config.recall_ks)?;
            write_report_json(&out(&json), &report)?;
            write_report_tsv(&out(&tsv), &report)?;
            Ok(report)
        })?;
        reports.push(report);
    }
    let final_report = reports.pop().expect("three reports");
    let reranker_report = reports.pop().expect("three reports");
    let retriever_report = reports.pop().expect("three reports");
    Ok(PipelineSummary {
        retriever: retriever_report,
        reranker: reranker_report,
        final_report,
        judge: judged.stats,
        manifest: manifest.path().to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::PoolEntry;
    use std::io::Write;

    fn pool(q: &str, ids: &[&str]) -> CandidatePool {
        CandidatePool {
            query_id: q.into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, d)| PoolEntry {
                    doc_id: d.to_string(),
                    similarity: 1.0 - i as f64 * 0.01,
                    rank: i + 1,
                })
                .collect(),
        }
    }

    fn tsv(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn scores_file_round() {
        let f = tsv(&["query_id\tdoc_id\tscore", "q1\ta\t0.5", "q1\tb\t1.5", "", "q2\ta\t-2"]);
        let s = load_rerank_scores(f.path()).unwrap();
        assert_eq!(s["q1"]["b"], 1.5);
        assert_eq!(s["q2"]["a"], -2.0);
    }

    #[test]
    fn scores_file_errors() {
        assert!(load_rerank_scores(tsv(&["q\td\ts"]).path()).is_err());
        let dup = load_rerank_scores(tsv(&["query_id\tdoc_id\tscore", "q\ta\t1", "q\ta\t2"]).path());
        assert!(matches!(dup, Err(Error::DuplicateId { line: 3, .. })));
        let nan = load_rerank_scores(tsv(&["query_id\tdoc_id\tscore", "q\ta\tNaN"]).path());
        assert!(matches!(nan, Err(Error::Parse { line: 2, .. })));
        let short = load_rerank_scores(tsv(&["query_id\tdoc_id\tscore", "q\ta"]).path());
        assert!(matches!(short, Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn rerank_restricted_to_pool() {
        let pools = [pool("q", &["a", "b", "c"])];
        let mut scores = RerankScores::new();
        scores.entry("q".into()).or_default().extend([
            ("a".to_string(), 0.1),
            ("b".to_string(), 0.9),
            ("c".to_string(), 5.0),
        ]);
        let lists = rerank_lists(&pools, &scores, 2).unwrap();
        assert_eq!(lists[0].doc_ids().collect::<Vec<_>>(), ["b", "a"]);
        scores.get_mut("q").unwrap().remove("a");
        assert!(matches!(rerank_lists(&pools, &scores, 2), Err(Error::MissingIds(m)) if m == ["q/a"]));
    }

    #[test]
    fn mining_skips_unlabelled_and_absent_gold() {
        let pools = [pool("q1", &["a", "b", "c", "d", "e", "f"]), pool("q2", &["a", "b"])];
        let golds = BTreeMap::from([("q1".to_string(), Some("z".to_string())), ("q2".to_string(), None)]);
        let run = mine_pools(&pools, None, &golds, MiningStrategy::Ance, 2, 3, 1).unwrap();
        assert_eq!(run.triples.len(), 1);
        assert_eq!(run.skipped.len(), 1);
        let run = mine_pools(&pools, Some(&[]), &golds, MiningStrategy::ClusterGold, 2, 3, 1).unwrap();
        assert!(run.triples.is_empty());
        assert_eq!(run.skipped.len(), 2);
    }

    #[test]
    fn manifest_records_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut m = Manifest::open(&path, None).unwrap();
        let cfg = RunConfig::default();
        let out = dir.path().join("x.txt");
        m.run_stage(StageSpec::new("ok").output("x", &out), &cfg, || {
            std::fs::write(&out, "x").unwrap();
            Ok(())
        })
        .unwrap();
        let err = m.run_stage(StageSpec::new("bad"), &cfg, || Err::<(), _>(Error::invalid("boom")));
        assert!(err.is_err());
        let reread = Manifest::open(&path, None).unwrap();
        assert_eq!(reread.record.stages.len(), 2);
        assert_eq!(reread.completed().count(), 1);
        assert_eq!(reread.record.stages[1].status, StageStatus::Failed);
        assert_eq!(
            reread.record.stages[0].outputs["x"].sha256,
            "2d711642b726b04401627ca9fbac32f5c8530fb1903cc4db02258717921a4881"
        );
    }

    #[test]
    fn manifest_rejects_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let cfg_path = dir.path().join("run.toml");
        Manifest::open(&path, Some((&cfg_path, "rng_seed = 1\n"))).unwrap().save().unwrap();
        assert!(Manifest::open(&path, Some((&cfg_path, "rng_seed = 1\n"))).is_ok());
        assert!(Manifest::open(&path, Some((&cfg_path, "rng_seed = 2\n"))).is_err());
    }
}
