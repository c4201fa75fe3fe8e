//! Run configuration, read from TOML.
//!
//! ```toml
//! rng_seed = 13
//! k_range = [3, 6]
//! pool_size_retrieve = 200
//! pool_size_rerank = 20
//! side = "reranker"
//! exclude_top_m = 3
//! judge_candidates = 5
//!
//! [judge]
//! url = "http://localhost:8000/v1/chat/completions"
//! model = "judge"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::KRange;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_RECALL_KS;
use crate::judge::{EndpointConfig, Formulation, JudgeSettings};
use crate::mining::MiningStrategy;
use crate::model::ClaimText;

/// Which model the mined negatives are meant to train. Only changes the
/// default number of negatives per query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingSide {
    Retriever,
    #[default]
    Reranker,
}

impl TrainingSide {
    pub fn default_negatives(self) -> usize {
        match self {
            TrainingSide::Retriever => 1,
            TrainingSide::Reranker => 10,
        }
    }
}

pub const JUDGE_CANDIDATE_CHOICES: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub k_range: KRange,
    pub pool_size_retrieve: usize,
    pub pool_size_rerank: usize,
    pub side: TrainingSide,
    /// Defaults to 10 for the reranker side and 1 for the retriever side.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negatives_per_query: Option<usize>,
    pub exclude_top_m: usize,
    pub strategy: MiningStrategy,
    pub batch_size: usize,
    pub judge_candidates: usize,
    pub truncate_units: usize,
    pub claim_text: ClaimText,
    pub formulation: Formulation,
    pub recall_ks: Vec<usize>,
    pub judge: EndpointConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rng_seed: 13,
            k_range: KRange::default(),
            pool_size_retrieve: 200,
            pool_size_rerank: 20,
            side: TrainingSide::default(),
            negatives_per_query: None,
            exclude_top_m: 3,
            strategy: MiningStrategy::ClusterNonGold,
            batch_size: 16,
            judge_candidates: 5,
            truncate_units: 384,
            claim_text: ClaimText::Original,
            formulation: Formulation::Direct,
            recall_ks: DEFAULT_RECALL_KS.to_vec(),
            judge: EndpointConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = crate::io::read_text(path)?;
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn negatives(&self) -> usize {
        self.negatives_per_query.unwrap_or_else(|| self.side.default_negatives())
    }

    pub fn judge_settings(&self) -> JudgeSettings {
        JudgeSettings {
            formulation: self.formulation,
            candidates: self.judge_candidates,
            truncate_units: self.truncate_units,
            claim_text: self.claim_text,
            seed: self.rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        KRange::new(self.k_range.min, self.k_range.max)?;
        if !JUDGE_CANDIDATE_CHOICES.contains(&self.judge_candidates) {
            return fail(format!("judge_candidates must be 3, 5 or 7, got {}", self.judge_candidates));
        }
        for (name, size) in [
            ("pool_size_retrieve", self.pool_size_retrieve),
            ("pool_size_rerank", self.pool_size_rerank),
        ] {
            if size < self.judge_candidates {
                return fail(format!(
                    "{name} = {size} is smaller than judge_candidates = {}",
                    self.judge_candidates
                ));
            }
        }
        let n = self.negatives();
        if n == 0 {
            return fail("negatives_per_query must be positive".into());
        }
        if n > self.pool_size_retrieve {
            return fail(format!(
                "negatives_per_query = {n} exceeds pool_size_retrieve = {}",
                self.pool_size_retrieve
            ));
        }
        if self.truncate_units == 0 {
            return fail("truncate_units must be positive".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) {
            return fail("recall_ks must be a non-empty list of positive cutoffs".into());
        }
        if self.judge.max_attempts == 0 || self.judge.max_in_flight == 0 {
            return fail("judge.max_attempts and judge.max_in_flight must be positive".into());
        }
        Ok(())
    }
}
