//! Multi-stage scientific-source retrieval over precomputed embeddings.
//!
//! `sourcelab` takes documents, claims and their vectors from elsewhere and
//! runs everything downstream of the encoders:
//!
//! * exact top-k search into per-query candidate pools ([`index`]),
//! * k-means clustering of each pool with the cluster count picked by macro
//!   silhouette ([`cluster`]),
//! * hard-negative mining and training-triple export ([`mining`]),
//! * MRR@5 / Recall@K reports per language ([`eval`]),
//! * an LLM judge consulted only when the retriever and reranker disagree
//!   ([`judge`]),
//! * and a manifest-recording pipeline tying the stages together ([`run`]).
//!
//! Every random choice derives from one run seed ([`seed`]), so repeated runs
//! write identical files.
//!
//! ```
//! use sourcelab::{EmbeddingMatrix, FlatIndex};
//!
//! let docs = EmbeddingMatrix::from_rows([("a", [1.0f32, 0.0]), ("b", [0.6, 0.8])])?.normalize()?;
//! let index = FlatIndex::build(docs)?;
//! let pool = index.search_topk("q", &[0.0, 1.0], 2)?;
//! assert_eq!(pool.doc_ids().collect::<Vec<_>>(), ["b", "a"]);
//! # Ok::<(), sourcelab::Error>(())
//! ```

pub mod cluster;
pub mod config;
pub mod embedding;
mod error;
pub mod eval;
pub mod index;
pub mod io;
pub mod judge;
pub mod mining;
pub mod model;
pub mod run;
pub mod seed;

pub use cluster::{cluster_pool, kmeans_fit, select_k, silhouette_macro, ClusteredPool, KRange, PoolClustering};
pub use config::{RunConfig, TrainingSide};
pub use embedding::{load_embeddings, EmbeddingFormat, EmbeddingMatrix};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use index::{CandidatePool, FlatIndex, PoolEntry};
pub use judge::{Formulation, JudgeBackend, ParseStatus};
pub use mining::{mine, MiningFlag, MiningRequest, MiningStrategy, TrainingTriple};
pub use model::{
    load_collection, load_queries, ClaimText, Collection, Document, Language, QueryRecord, QuerySet, RankedList, Stage,
};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/mining.md")]
    mod mining {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/judge.md")]
    mod judge {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
