//! Domain records shared across the pipeline: documents, claims, and ranked
//! lists, plus their JSONL loaders.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{id_string, read_jsonl, write_jsonl};

/// One scientific paper.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Document {
    #[serde(deserialize_with = "id_string::deserialize")]
    pub doc_id: String,
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    #[serde(default)]
    pub venue: String,
    #[serde(default)]
    pub authors: Vec<String>,
}

/// An id-indexed document collection, kept in file order.
#[derive(Debug, Clone, Default)]
pub struct Collection {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Collection {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.title.trim().is_empty() {
                return Err(Error::invalid(format!("document `{}` has an empty title", d.doc_id)));
            }
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate doc_id `{}`", d.doc_id)));
            }
        }
        Ok(Collection { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.doc_id.as_str())
    }
}

/// Loads a document collection from JSONL.
///
/// Duplicate ids are reported with the line number of the second occurrence.
pub fn load_collection(path: &Path) -> Result<Collection> {
    let rows: Vec<(usize, Document)> = read_jsonl(path)?;
    let mut seen = HashSet::with_capacity(rows.len());
    let mut docs = Vec::with_capacity(rows.len());
    for (line, doc) in rows {
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: doc.doc_id,
            });
        }
        if doc.title.trim().is_empty() {
            return Err(Error::parse(path, line, format!("document `{}` has an empty title", doc.doc_id)));
        }
        docs.push(doc);
    }
    log::info!("loaded {} documents from {}", docs.len(), path.display());
    Collection::from_documents(docs)
}

pub fn write_collection(path: &Path, collection: &Collection) -> Result<()> {
    write_jsonl(path, collection.documents()).map(|_| ())
}

/// Claim language. Anything other than the three task languages maps to
/// `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Language {
    En,
    De,
    Fr,
    Other,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::En => "EN",
            Language::De => "DE",
            Language::Fr => "FR",
            Language::Other => "OTHER",
        }
    }

    /// Parses a language tag; unknown tags come back as `None`.
    pub fn parse_known(tag: &str) -> Option<Language> {
        match tag.trim().to_ascii_uppercase().as_str() {
            "EN" => Some(Language::En),
            "DE" => Some(Language::De),
            "FR" => Some(Language::Fr),
            "OTHER" => Some(Language::Other),
            _ => None,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(Language::parse_known(s).unwrap_or(Language::Other))
    }
}

/// One claim to be matched against the collection.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub language: Language,
    pub text_original: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_translated: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_doc_id: Option<String>,
}

impl QueryRecord {
    /// Claim text for a given text source; falls back to the original text
    /// when no translation is available.
    pub fn text(&self, source: ClaimText) -> &str {
        match source {
            ClaimText::Original => &self.text_original,
            ClaimText::Translated => self.text_translated.as_deref().unwrap_or(&self.text_original),
        }
    }
}

/// Which version of the claim text a stage consumes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClaimText {
    #[default]
    Original,
    Translated,
}

#[derive(Deserialize)]
struct QueryLine {
    #[serde(deserialize_with = "id_string::deserialize")]
    query_id: String,
    #[serde(default)]
    language: Option<String>,
    #[serde(default)]
    text_original: Option<String>,
    #[serde(default)]
    text_translated: Option<String>,
    #[serde(default, deserialize_with = "id_string::option::deserialize")]
    gold_doc_id: Option<String>,
}

/// Loaded queries plus the number of language tags that fell back to
/// `Other`.
#[derive(Debug, Clone, Default)]
pub struct QuerySet {
    pub queries: Vec<QueryRecord>,
    pub unknown_language_count: usize,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Checks that every gold id resolves in `collection`.
    pub fn validate_against(&self, collection: &Collection) -> Result<()> {
        let missing: Vec<String> = self
            .queries
            .iter()
            .filter_map(|q| q.gold_doc_id.as_ref())
            .filter(|g| !collection.contains(g))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingIds(missing))
        }
    }

    pub fn golds(&self) -> BTreeMap<String, Option<String>> {
        self.queries
            .iter()
            .map(|q| (q.query_id.clone(), q.gold_doc_id.clone()))
            .collect()
    }

    pub fn get(&self, query_id: &str) -> Option<&QueryRecord> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }
}

pub fn load_queries(path: &Path) -> Result<QuerySet> {
    let rows: Vec<(usize, QueryLine)> = read_jsonl(path)?;
    let mut set = QuerySet::default();
    let mut seen = HashSet::new();
    for (line, q) in rows {
        let text_original = match q.text_original {
            Some(t) if !t.trim().is_empty() => t,
            _ => return Err(Error::parse(path, line, "missing text_original")),
        };
        if !seen.insert(q.query_id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: q.query_id,
            });
        }
        let language = match q.language.as_deref().and_then(Language::parse_known) {
            Some(l) => l,
            None => {
                set.unknown_language_count += 1;
                Language::Other
            }
        };
        set.queries.push(QueryRecord {
            query_id: q.query_id,
            language,
            text_original,
            text_translated: q.text_translated,
            gold_doc_id: q.gold_doc_id,
        });
    }
    if set.unknown_language_count > 0 {
        log::warn!(
            "{}: {} queries with unknown language mapped to OTHER",
            path.display(),
            set.unknown_language_count
        );
    }
    Ok(set)
}

pub fn write_queries(path: &Path, queries: &[QueryRecord]) -> Result<()> {
    write_jsonl(path, queries).map(|_| ())
}

/// Pipeline stage that produced a ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Retriever,
    Reranker,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
}

/// Total order used for every ranking: score descending, then doc id
/// ascending.
pub fn rank_order(a_id: &str, a_score: f64, b_id: &str, b_score: f64) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// A scored ranking for one query. Entries are always in [`rank_order`] and
/// doc ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub stage: Stage,
    entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn from_scores<I, S>(query_id: impl Into<String>, scores: I, stage: Stage) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let query_id = query_id.into();
        let mut entries: Vec<RankedEntry> = scores
            .into_iter()
            .map(|(d, score)| RankedEntry { doc_id: d.into(), score })
            .collect();
        if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::invalid(format!(
                "query `{query_id}`: non-finite score for `{}`",
                e.doc_id
            )));
        }
        entries.sort_by(|a, b| rank_order(&a.doc_id, a.score, &b.doc_id, b.score));
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::invalid(format!(
                    "query `{query_id}`: duplicate doc_id `{}`",
                    e.doc_id
                )));
            }
        }
        Ok(RankedList { query_id, stage, entries })
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self) -> Option<&str> {
        self.entries.first().map(|e| e.doc_id.as_str())
    }

    /// 1-based rank of `doc_id`, if present.
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.doc_id == doc_id).map(|p| p + 1)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn truncated(&self, len: usize) -> RankedList {
        RankedList {
            query_id: self.query_id.clone(),
            stage: self.stage,
            entries: self.entries.iter().take(len).cloned().collect(),
        }
    }

    pub fn with_stage(mut self, stage: Stage) -> RankedList {
        self.stage = stage;
        self
    }
}

/// Wire form shared by candidate pools and ranked lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct RankingLine {
    #[serde(deserialize_with = "id_string::deserialize")]
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    pub entries: Vec<RankingEntryLine>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct RankingEntryLine {
    #[serde(deserialize_with = "id_string::deserialize")]
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

impl From<&RankedList> for RankingLine {
    fn from(list: &RankedList) -> Self {
        RankingLine {
            query_id: list.query_id.clone(),
            stage: Some(list.stage),
            entries: list
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| RankingEntryLine {
                    doc_id: e.doc_id.clone(),
                    score: e.score,
                    rank: i + 1,
                })
                .collect(),
        }
    }
}

pub fn write_rankings(path: &Path, lists: &[RankedList]) -> Result<()> {
    let lines: Vec<RankingLine> = lists.iter().map(RankingLine::from).collect();
    write_jsonl(path, &lines).map(|_| ())
}

/// Loads ranked lists (or candidate pools). Lines without a `stage` field
/// take `default_stage`. Ranks must be 1..n in score order.
pub fn load_rankings(path: &Path, default_stage: Stage) -> Result<Vec<RankedList>> {
    let rows: Vec<(usize, RankingLine)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if !seen.insert(row.query_id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: row.query_id,
            });
        }
        for (i, e) in row.entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(Error::parse(path, line, format!("rank gap at `{}`", e.doc_id)));
            }
        }
        let stage = row.stage.unwrap_or(default_stage);
        let list = RankedList::from_scores(
            row.query_id,
            row.entries.into_iter().map(|e| (e.doc_id, e.score)),
            stage,
        )
        .map_err(|e| Error::parse(path, line, e.to_string()))?;
        out.push(list);
    }
    Ok(out)
}
