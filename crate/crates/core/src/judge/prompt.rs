//! Prompt templates for the three evidence-selection formulations.
//!
//! The fixed template lines are reproduced verbatim; only the claim, the
//! candidate ids, titles, (truncated) abstracts, retrieval ranks and the
//! candidate count vary.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::{assign_letters, Formulation, JudgeCase};
use crate::seed::{derive_seed, rng};

pub const TRUNCATION_MARKER: &str = " […]";

/// Keeps the first `limit_units` whitespace-separated words, joined by single
/// spaces, and appends [`TRUNCATION_MARKER`] if anything was cut. Text at or
/// under the limit is returned unchanged.
pub fn truncate_abstract(text: &str, limit_units: usize) -> String {
    let limit_units = limit_units.max(1);
    let mut words = text.split_whitespace();
    let head: Vec<&str> = words.by_ref().take(limit_units).collect();
    if words.next().is_none() {
        return text.to_string();
    }
    let mut out = head.join(" ");
    out.push_str(TRUNCATION_MARKER);
    out
}

/// A rendered prompt plus the case as presented, i.e. with the candidate
/// order and letters the model actually sees.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub formulation: Formulation,
    pub text: String,
    pub presented: JudgeCase,
}

/// Candidate order for the pairwise prompt: shuffled with a per-query seed,
/// then re-lettered so the baseline is always `A` and the others take `B`,
/// `C`, ... in display order.
pub fn pairwise_view(case: &JudgeCase, seed: u64) -> JudgeCase {
    let mut view = case.clone();
    view.candidates
        .shuffle(&mut rng(derive_seed(seed, "pairwise-order", &case.query_id)));
    let mut next = 1;
    let letters: Vec<String> = view
        .candidates
        .iter()
        .map(|c| {
            if c.doc_id == case.baseline_doc_id {
                super::letter_id(0)
            } else {
                next += 1;
                super::letter_id(next - 1)
            }
        })
        .collect();
    for (c, l) in view.candidates.iter_mut().zip(letters) {
        c.letter = l;
    }
    view
}

pub fn build_prompt(case: &JudgeCase, formulation: Formulation, seed: u64) -> RenderedPrompt {
    match formulation {
        Formulation::Direct => {
            let mut presented = case.clone();
            assign_letters(&mut presented.candidates);
            RenderedPrompt {
                formulation,
                text: render_direct(&presented),
                presented,
            }
        }
        Formulation::Pairwise => {
            let presented = pairwise_view(case, seed);
            RenderedPrompt {
                formulation,
                text: render_pairwise(&presented),
                presented,
            }
        }
        Formulation::Listwise => RenderedPrompt {
            formulation,
            text: render_listwise(case),
            presented: case.clone(),
        },
    }
}

fn render_direct(case: &JudgeCase) -> String {
    let mut s = String::from(
        "Instruction: Act as a scientific fact-checker. You are given a claim\n\
         and a list of candidate scientific papers.\n\
         Choose the single paper that provides the strongest evidence\n\
         supporting or verifying the claim.\n\n",
    );
    let _ = write!(s, "Claim: {}\n\nCandidates:\n", case.claim_text);
    for c in &case.candidates {
        let _ = write!(s, "Paper ID {}:\nTitle: {}\nAbstract: {}\n\n", c.letter, c.title, c.abstract_text);
    }
    s.push_str(
        "Output instructions:\n\
         Return valid JSON only.\n\
         Use this exact format: {\"selected_id\": \"A\"}",
    );
    s
}

fn render_pairwise(case: &JudgeCase) -> String {
    // alternatives are lettered B.. in order, so the last one is letter_id(n)
    let alternatives = case.candidates.len().saturating_sub(1);
    let compared = match alternatives {
        0 => "Papers".to_string(),
        1 => "Paper B".to_string(),
        n => format!("Papers B-{}", super::letter_id(n)),
    };
    let mut s = String::from(
        "Instruction: Act as a scientific fact-checker.\n\
         Candidate Paper A is the baseline current best guess.\n\
         First decide whether Paper A adequately supports or verifies the claim.\n",
    );
    let _ = writeln!(s, "Then compare {compared} against Paper A.");
    s.push_str(
        "If none is clearly better than Paper A, keep A.\n\
         If another paper is clearly better, choose the single best alternative.\n\
         Retrieval rank is only a weak prior.\n\n",
    );
    let _ = write!(s, "Claim: {}\n\nCandidates (order randomized):\n", case.claim_text);
    for c in &case.candidates {
        let rank = c.retrieval_rank.map_or_else(|| "n/a".to_string(), |r| r.to_string());
        let _ = write!(
            s,
            "Paper ID {} (retrieval rank: {rank}):\nTitle: {}\nAbstract: {}\n\n",
            c.letter, c.title, c.abstract_text
        );
    }
    s.push_str(
        "Output instructions:\n\
         Return valid JSON only.\n\
         Use this exact format: {\"selected_id\": \"X\"}",
    );
    s
}

fn render_listwise(case: &JudgeCase) -> String {
    let n = case.candidates.len();
    let mut s = String::from(
        "You are RankGPT, an intelligent assistant that can rank passages\n\
         based on their relevance to a search query.\n",
    );
    let _ = write!(
        s,
        "I will provide you with {n} candidate papers, each identified by a\n\
         number in square brackets.\n\
         Rank the papers based on how well they support or verify the claim.\n\n\
         Claim: {}\n\nCandidates:\n",
        case.claim_text
    );
    for (i, c) in case.candidates.iter().enumerate() {
        let _ = write!(s, "[{}] Title: {}\nAbstract: {}\n\n", i + 1, c.title, c.abstract_text);
    }
    let _ = write!(
        s,
        "Rank the {n} candidates above based on their relevance to the claim.\n\
         Return only the ranking permutation using the format\n\
         [1] > [2] > ... > [N].\n\
         Do not explain your answer."
    );
    s
}
