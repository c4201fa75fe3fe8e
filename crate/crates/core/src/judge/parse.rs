//! Turning free-form judge replies into selections.

use std::sync::LazyLock;

use regex::Regex;

use super::{JudgeCase, ParseStatus};

/// Letter selection from a DIRECT or PAIRWISE reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub doc_id: String,
    pub status: ParseStatus,
}

/// Finds the first JSON object in `raw` that has a `selected_id` key and maps
/// its letter onto `case`. Anything else selects the baseline with
/// `PARSE_FAIL`.
pub fn parse_selection(raw: &str, case: &JudgeCase) -> Selection {
    let fail = || Selection {
        doc_id: case.baseline_doc_id.clone(),
        status: ParseStatus::ParseFail,
    };
    let Some(value) = first_object_with(raw, "selected_id") else {
        return fail();
    };
    let Some(letter) = value.as_str().map(|s| s.trim().to_ascii_uppercase()) else {
        return fail();
    };
    match case.candidates.iter().find(|c| c.letter == letter) {
        Some(c) => Selection {
            doc_id: c.doc_id.clone(),
            status: ParseStatus::Ok,
        },
        None => fail(),
    }
}

fn first_object_with(raw: &str, key: &str) -> Option<serde_json::Value> {
    for (pos, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(mut map))) = stream.next() {
            if let Some(v) = map.remove(key) {
                return Some(v);
            }
        }
    }
    None
}

/// A completed LISTWISE ranking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    /// 1-based candidate numbers, always a permutation of `1..=n`.
    pub order: Vec<usize>,
    /// How many in-range, first-occurrence indices came from the reply.
    pub parsed: usize,
}

impl Permutation {
    pub fn status(&self) -> ParseStatus {
        if self.parsed > 0 {
            ParseStatus::Ok
        } else {
            ParseStatus::ParseFail
        }
    }
}

static BRACKETED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[\s*(\d+)\s*\]").expect("valid regex"));

/// Reads `[i]` tokens in order, drops repeats and out-of-range numbers, then
/// appends whatever is missing in candidate order.
pub fn parse_permutation(raw: &str, n: usize) -> Permutation {
    let mut seen = vec![false; n + 1];
    let mut order = Vec::with_capacity(n);
    for cap in BRACKETED.captures_iter(raw) {
        let Ok(i) = cap[1].parse::<usize>() else {
            continue;
        };
        if (1..=n).contains(&i) && !seen[i] {
            seen[i] = true;
            order.push(i);
        }
    }
    let parsed = order.len();
    order.extend((1..=n).filter(|&i| !seen[i]));
    Permutation { order, parsed }
}
