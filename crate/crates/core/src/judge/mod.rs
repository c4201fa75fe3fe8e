//! Selective LLM judging of retriever/reranker disagreements.
//!
//! The judge only runs when the retriever's and the reranker's top-1 differ.
//! It sees the top reranked documents, with the retriever's top-1 swapped in
//! for the last slot when it is not already there, and either picks one
//! (DIRECT, PAIRWISE) or orders them (LISTWISE). The pick is promoted to the
//! top of the reranker list. Unparseable replies and failed calls keep the
//! reranker's prediction.

mod client;
mod parse;
mod prompt;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use client::{
    CallReply, CallResult, EndpointConfig, HttpJudge, JudgeBackend, NoEndpoint, ENV_MODEL, ENV_TIMEOUT, ENV_TOKEN, ENV_URL,
};
pub use parse::{parse_permutation, parse_selection, Permutation, Selection};
pub use prompt::{build_prompt, pairwise_view, truncate_abstract, RenderedPrompt, TRUNCATION_MARKER};

use crate::error::{Error, Result};
use crate::model::{ClaimText, Collection, QuerySet, RankedList, Stage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Formulation {
    #[default]
    Direct,
    Pairwise,
    Listwise,
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Formulation::Direct => "direct",
            Formulation::Pairwise => "pairwise",
            Formulation::Listwise => "listwise",
        })
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "direct" => Ok(Formulation::Direct),
            "pairwise" => Ok(Formulation::Pairwise),
            "listwise" => Ok(Formulation::Listwise),
            _ => Err(Error::invalid(format!("unknown formulation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParseStatus {
    Ok,
    ParseFail,
    ContextFail,
}

/// Spreadsheet-style ids: A..Z, AA, AB, ...
pub fn letter_id(index: usize) -> String {
    let mut n = index + 1;
    let mut out = Vec::new();
    while n > 0 {
        n -= 1;
        out.push(b'A' + (n % 26) as u8);
        n /= 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

pub(crate) fn assign_letters(candidates: &mut [Candidate]) {
    for (i, c) in candidates.iter_mut().enumerate() {
        c.letter = letter_id(i);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub letter: String,
    pub doc_id: String,
    pub title: String,
    /// Already truncated.
    pub abstract_text: String,
    /// 1-based rank in the retriever list, if the document is there.
    pub retrieval_rank: Option<usize>,
}

/// One disagreement to be judged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeCase {
    pub query_id: String,
    pub claim_text: String,
    pub candidates: Vec<Candidate>,
    /// Reranker top-1; the fallback answer.
    pub baseline_doc_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeSettings {
    pub formulation: Formulation,
    pub candidates: usize,
    pub truncate_units: usize,
    pub claim_text: ClaimText,
    pub seed: u64,
}

impl Default for JudgeSettings {
    fn default() -> Self {
        JudgeSettings {
            formulation: Formulation::Direct,
            candidates: 5,
            truncate_units: 384,
            claim_text: ClaimText::Original,
            seed: 0,
        }
    }
}

/// Candidate doc ids for a disagreement, or `None` when both stages agree.
pub fn disagreement_candidates(retriever: &RankedList, reranker: &RankedList, budget: usize) -> Option<Vec<String>> {
    let (ret_top, rer_top) = (retriever.top()?, reranker.top()?);
    if ret_top == rer_top {
        return None;
    }
    let mut ids: Vec<String> = reranker.doc_ids().take(budget).map(str::to_string).collect();
    if !ids.iter().any(|d| d == ret_top) {
        if ids.len() >= budget && ids.len() > 1 {
            ids.pop();
        }
        ids.push(ret_top.to_string());
    }
    Some(ids)
}

/// Builds the judge case for one query, or `None` when the stages agree.
pub fn detect_and_assemble(
    retriever: &RankedList,
    reranker: &RankedList,
    claim_text: &str,
    collection: &Collection,
    settings: &JudgeSettings,
) -> Result<Option<JudgeCase>> {
    let Some(ids) = disagreement_candidates(retriever, reranker, settings.candidates) else {
        return Ok(None);
    };
    let mut candidates = Vec::with_capacity(ids.len());
    for doc_id in ids {
        let doc = collection
            .get(&doc_id)
            .ok_or_else(|| Error::MissingIds(vec![doc_id.clone()]))?;
        candidates.push(Candidate {
            letter: String::new(),
            retrieval_rank: retriever.rank_of(&doc_id),
            title: doc.title.clone(),
            abstract_text: truncate_abstract(&doc.abstract_text, settings.truncate_units),
            doc_id,
        });
    }
    assign_letters(&mut candidates);
    Ok(Some(JudgeCase {
        query_id: reranker.query_id.clone(),
        claim_text: claim_text.to_string(),
        baseline_doc_id: reranker.top().expect("non-empty").to_string(),
        candidates,
    }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub query_id: String,
    pub formulation: Formulation,
    pub raw_response: String,
    pub selected_doc_id: Option<String>,
    pub parse_status: ParseStatus,
    pub fell_back: bool,
    pub attempts: u32,
    /// Endpoint error, when the call itself failed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub latency: Duration,
}

/// Interprets a reply to `rendered` for `case`.
pub fn interpret(rendered: &RenderedPrompt, call: &CallResult) -> JudgeOutcome {
    let case = &rendered.presented;
    let (raw, status, selected, error) = match &call.reply {
        CallReply::Text(raw) => {
            let (status, selected) = match rendered.formulation {
                Formulation::Direct | Formulation::Pairwise => {
                    let s = parse_selection(raw, case);
                    (s.status, s.doc_id)
                }
                Formulation::Listwise => {
                    let p = parse_permutation(raw, case.candidates.len());
                    let status = p.status();
                    let doc = if status == ParseStatus::Ok {
                        case.candidates[p.order[0] - 1].doc_id.clone()
                    } else {
                        case.baseline_doc_id.clone()
                    };
                    (status, doc)
                }
            };
            (raw.clone(), status, selected, None)
        }
        CallReply::ContextExceeded(body) => (
            body.clone(),
            ParseStatus::ContextFail,
            case.baseline_doc_id.clone(),
            None,
        ),
        CallReply::Failed(err) => (
            String::new(),
            ParseStatus::ParseFail,
            case.baseline_doc_id.clone(),
            Some(err.clone()),
        ),
    };
    JudgeOutcome {
        query_id: case.query_id.clone(),
        formulation: rendered.formulation,
        raw_response: raw,
        fell_back: status != ParseStatus::Ok,
        selected_doc_id: Some(selected),
        parse_status: status,
        attempts: call.attempts,
        error,
        latency: call.latency,
    }
}

/// Final ranking: the reranker list with the judge's pick moved to the top.
///
/// The promoted document scores one unit above the reranker's best so the
/// list stays in score order; everything else keeps its reranker score.
pub fn resolve(reranker: &RankedList, outcome: Option<&JudgeOutcome>) -> RankedList {
    let selected = outcome
        .filter(|o| !o.fell_back)
        .and_then(|o| o.selected_doc_id.as_deref())
        .filter(|&s| Some(s) != reranker.top());
    let Some(selected) = selected else {
        return reranker.clone().with_stage(Stage::Final);
    };
    let top = reranker.entries().first().map_or(0.0, |e| e.score);
    let scores = std::iter::once((selected.to_string(), top + 1.0)).chain(
        reranker
            .entries()
            .iter()
            .filter(|e| e.doc_id != selected)
            .map(|e| (e.doc_id.clone(), e.score)),
    );
    RankedList::from_scores(reranker.query_id.clone(), scores, Stage::Final).expect("ids stay unique")
}

/// One audit line per judged case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub query_id: String,
    pub formulation: Formulation,
    /// Doc ids in prompt order, keyed by the label shown to the model.
    pub candidates: Vec<(String, String)>,
    pub baseline_doc_id: String,
    pub prompt: String,
    pub raw_response: String,
    pub selected_doc_id: Option<String>,
    pub parse_status: ParseStatus,
    pub fell_back: bool,
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeStats {
    pub n_queries: usize,
    pub n_disagreements: usize,
    pub n_calls: usize,
    pub parse_ok: usize,
    pub parse_fail: usize,
    pub context_fail: usize,
    pub endpoint_fail: usize,
    pub fell_back: usize,
}

#[derive(Debug, Clone)]
pub struct JudgeRun {
    pub finals: Vec<RankedList>,
    pub outcomes: Vec<JudgeOutcome>,
    pub transcript: Vec<TranscriptEntry>,
    pub stats: JudgeStats,
}

/// Runs the judge over every disagreement and assembles FINAL rankings.
///
/// Output order follows `reranker`; calls run concurrently up to
/// `max_in_flight`.
pub fn run_judge(
    retriever: &[RankedList],
    reranker: &[RankedList],
    queries: &QuerySet,
    collection: &Collection,
    settings: &JudgeSettings,
    backend: &dyn JudgeBackend,
    max_in_flight: usize,
) -> Result<JudgeRun> {
    let ret_by_id: HashMap<&str, &RankedList> = retriever.iter().map(|l| (l.query_id.as_str(), l)).collect();
    if ret_by_id.len() != reranker.len() || reranker.iter().any(|l| !ret_by_id.contains_key(l.query_id.as_str())) {
        let mut diff: Vec<String> = retriever
            .iter()
            .map(|l| l.query_id.clone())
            .filter(|q| !reranker.iter().any(|r| &r.query_id == q))
            .chain(
                reranker
                    .iter()
                    .map(|l| l.query_id.clone())
                    .filter(|q| !ret_by_id.contains_key(q.as_str())),
            )
            .collect();
        diff.sort();
        return Err(Error::QuerySetMismatch(diff));
    }
    let mut cases = Vec::new();
    for rer in reranker {
        let ret = ret_by_id[rer.query_id.as_str()];
        let query = queries
            .get(&rer.query_id)
            .ok_or_else(|| Error::MissingIds(vec![rer.query_id.clone()]))?;
        if let Some(case) = detect_and_assemble(ret, rer, query.text(settings.claim_text), collection, settings)? {
            cases.push(build_prompt(&case, settings.formulation, settings.seed));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("judge worker pool: {e}")))?;
    let judged: Vec<(TranscriptEntry, JudgeOutcome)> = pool.install(|| {
        cases
            .par_iter()
            .map(|rendered| {
                let call = backend.complete(&rendered.text);
                let outcome = interpret(rendered, &call);
                let entry = TranscriptEntry {
                    query_id: outcome.query_id.clone(),
                    formulation: rendered.formulation,
                    candidates: rendered
                        .presented
                        .candidates
                        .iter()
                        .enumerate()
                        .map(|(i, c)| {
                            let label = match rendered.formulation {
                                Formulation::Listwise => format!("[{}]", i + 1),
                                _ => c.letter.clone(),
                            };
                            (label, c.doc_id.clone())
                        })
                        .collect(),
                    baseline_doc_id: rendered.presented.baseline_doc_id.clone(),
                    prompt: rendered.text.clone(),
                    raw_response: outcome.raw_response.clone(),
                    selected_doc_id: outcome.selected_doc_id.clone(),
                    parse_status: outcome.parse_status,
                    fell_back: outcome.fell_back,
                    attempts: outcome.attempts,
                    error: outcome.error.clone(),
                };
                (entry, outcome)
            })
            .collect()
    });

    let (mut transcript, mut outcomes): (Vec<_>, Vec<_>) = judged.into_iter().unzip();
    transcript.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    outcomes.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let by_query: HashMap<&str, &JudgeOutcome> = outcomes.iter().map(|o| (o.query_id.as_str(), o)).collect();
    let finals = reranker
        .iter()
        .map(|r| resolve(r, by_query.get(r.query_id.as_str()).copied()))
        .collect();

    let stats = JudgeStats {
        n_queries: reranker.len(),
        n_disagreements: outcomes.len(),
        n_calls: outcomes.len(),
        parse_ok: outcomes.iter().filter(|o| o.parse_status == ParseStatus::Ok).count(),
        parse_fail: outcomes
            .iter()
            .filter(|o| o.parse_status == ParseStatus::ParseFail && o.error.is_none())
            .count(),
        context_fail: outcomes.iter().filter(|o| o.parse_status == ParseStatus::ContextFail).count(),
        endpoint_fail: outcomes.iter().filter(|o| o.error.is_some()).count(),
        fell_back: outcomes.iter().filter(|o| o.fell_back).count(),
    };
    Ok(JudgeRun {
        finals,
        outcomes,
        transcript,
        stats,
    })
}
