//! Ranking metrics and run reports.
//!
//! Per-query values are averaged within each language, and the macro block
//! is the unweighted mean of those per-language means, so a small language
//! counts as much as a large one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_json_pretty, write_text};
use crate::model::{Language, QuerySet, RankedList, Stage};

pub const MRR_CUTOFF: usize = 5;
pub const DEFAULT_RECALL_KS: [usize; 3] = [10, 20, 50];

/// `1/rank` if `gold` is within the first `cutoff` entries, else 0.
pub fn reciprocal_rank_at(ranked: &RankedList, gold: &str, cutoff: usize) -> f64 {
    match ranked.rank_of(gold) {
        Some(r) if r <= cutoff => 1.0 / r as f64,
        _ => 0.0,
    }
}

/// 1 if `gold` is within the first `k` entries, else 0.
pub fn recall_at(ranked: &RankedList, gold: &str, k: usize) -> f64 {
    match ranked.rank_of(gold) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub query_id: String,
    pub language: Language,
    pub rr_at_5: f64,
    pub recall_at: BTreeMap<usize, f64>,
}

pub fn query_metrics(ranked: &RankedList, language: Language, gold: &str, ks: &[usize]) -> QueryMetrics {
    QueryMetrics {
        query_id: ranked.query_id.clone(),
        language,
        rr_at_5: reciprocal_rank_at(ranked, gold, MRR_CUTOFF),
        recall_at: ks.iter().map(|&k| (k, recall_at(ranked, gold, k))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub mrr_at_5: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementBlock {
    pub n_queries: usize,
    pub agree_rate: f64,
    /// `None` when no query agrees.
    pub agree_correct_rate: Option<f64>,
    pub n_disagreements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    pub per_language: BTreeMap<Language, MetricBlock>,
    #[serde(rename = "macro")]
    pub macro_avg: MetricBlock,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementBlock>,
}

fn mean(values: &mut [f64]) -> f64 {
    // sorted summation makes the result independent of input order
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-language means and their unweighted macro average.
pub fn aggregate(per_query: &[QueryMetrics]) -> EvalReport {
    let mut groups: BTreeMap<Language, Vec<&QueryMetrics>> = BTreeMap::new();
    for q in per_query {
        groups.entry(q.language).or_default().push(q);
    }
    let ks: BTreeSet<usize> = per_query.iter().flat_map(|q| q.recall_at.keys().copied()).collect();
    let mut per_language = BTreeMap::new();
    for (lang, qs) in &groups {
        let mut rr: Vec<f64> = qs.iter().map(|q| q.rr_at_5).collect();
        let recall_at = ks
            .iter()
            .map(|&k| {
                let mut v: Vec<f64> = qs.iter().map(|q| q.recall_at.get(&k).copied().unwrap_or(0.0)).collect();
                (k, mean(&mut v))
            })
            .collect();
        per_language.insert(
            *lang,
            MetricBlock {
                mrr_at_5: mean(&mut rr),
                recall_at,
                n_queries: qs.len(),
            },
        );
    }
    let macro_avg = if per_language.is_empty() {
        log::warn!("no evaluated queries; macro block is empty");
        MetricBlock {
            mrr_at_5: 0.0,
            recall_at: ks.iter().map(|&k| (k, 0.0)).collect(),
            n_queries: 0,
        }
    } else {
        let blocks: Vec<&MetricBlock> = per_language.values().collect();
        let n = blocks.len() as f64;
        MetricBlock {
            mrr_at_5: blocks.iter().map(|b| b.mrr_at_5).sum::<f64>() / n,
            recall_at: ks
                .iter()
                .map(|&k| (k, blocks.iter().map(|b| b.recall_at[&k]).sum::<f64>() / n))
                .collect(),
            n_queries: blocks.iter().map(|b| b.n_queries).sum(),
        }
    };
    EvalReport {
        stage: None,
        per_language,
        macro_avg,
        agreement: None,
    }
}

fn symmetric_difference<'a>(a: impl Iterator<Item = &'a str>, b: impl Iterator<Item = &'a str>) -> Vec<String> {
    let a: BTreeSet<&str> = a.collect();
    let b: BTreeSet<&str> = b.collect();
    a.symmetric_difference(&b).map(|s| s.to_string()).collect()
}

/// How often the retriever and reranker pick the same top document, and how
/// often that shared pick is the gold.
pub fn agreement_report(
    retriever: &[RankedList],
    reranker: &[RankedList],
    golds: &BTreeMap<String, Option<String>>,
) -> Result<AgreementBlock> {
    let diff = symmetric_difference(
        retriever.iter().map(|l| l.query_id.as_str()),
        reranker.iter().map(|l| l.query_id.as_str()),
    );
    if !diff.is_empty() {
        return Err(Error::QuerySetMismatch(diff));
    }
    let rerank: HashMap<&str, &RankedList> = reranker.iter().map(|l| (l.query_id.as_str(), l)).collect();
    let mut agree = 0usize;
    let mut agree_correct = 0usize;
    for r in retriever {
        let k = rerank[r.query_id.as_str()];
        match (r.top(), k.top()) {
            (Some(a), Some(b)) if a == b => {
                agree += 1;
                if golds.get(&r.query_id).and_then(|g| g.as_deref()) == Some(a) {
                    agree_correct += 1;
                }
            }
            _ => {}
        }
    }
    let n = retriever.len();
    Ok(AgreementBlock {
        n_queries: n,
        agree_rate: if n == 0 { 0.0 } else { agree as f64 / n as f64 },
        agree_correct_rate: (agree > 0).then(|| agree_correct as f64 / agree as f64),
        n_disagreements: n - agree,
    })
}

/// Scores `lists` against the gold labels in `queries`.
///
/// Every query with a gold label needs a ranking, and every ranking must
/// belong to a known query.
pub fn evaluate(lists: &[RankedList], queries: &QuerySet, ks: &[usize]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &RankedList> = lists.iter().map(|l| (l.query_id.as_str(), l)).collect();
    let known: BTreeSet<&str> = queries.queries.iter().map(|q| q.query_id.as_str()).collect();
    let mut problems: Vec<String> = lists
        .iter()
        .map(|l| l.query_id.as_str())
        .filter(|q| !known.contains(q))
        .map(|q| q.to_string())
        .collect();
    let mut per_query = Vec::new();
    for q in &queries.queries {
        let Some(gold) = q.gold_doc_id.as_deref() else {
            continue;
        };
        match by_id.get(q.query_id.as_str()) {
            Some(list) => per_query.push(query_metrics(list, q.language, gold, ks)),
            None => problems.push(q.query_id.clone()),
        }
    }
    if !problems.is_empty() {
        problems.sort();
        return Err(Error::QuerySetMismatch(problems));
    }
    let mut report = aggregate(&per_query);
    report.stage = lists.first().map(|l| l.stage);
    Ok(report)
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    write_json_pretty(path, report)
}

/// Fixed-column TSV: one row per language, then `MACRO`.
pub fn report_tsv(report: &EvalReport) -> String {
    let ks: Vec<usize> = report.macro_avg.recall_at.keys().copied().collect();
    let mut out = String::from("scope\tn_queries\tmrr_at_5");
    for k in &ks {
        let _ = write!(out, "\trecall_at_{k}");
    }
    out.push('\n');
    let row = |out: &mut String, scope: &str, b: &MetricBlock| {
        let _ = write!(out, "{scope}\t{}\t{:.6}", b.n_queries, b.mrr_at_5);
        for k in &ks {
            let _ = write!(out, "\t{:.6}", b.recall_at.get(k).copied().unwrap_or(0.0));
        }
        out.push('\n');
    };
    for (lang, b) in &report.per_language {
        row(&mut out, lang.as_str(), b);
    }
    row(&mut out, "MACRO", &report.macro_avg);
    out
}

pub fn write_report_tsv(path: &Path, report: &EvalReport) -> Result<()> {
    write_text(path, &report_tsv(report))
}
