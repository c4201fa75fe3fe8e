#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sourcelab::embedding::write_jsonl_embeddings;
use sourcelab::model::{write_collection, write_queries};
use sourcelab::{Collection, Document, EmbeddingMatrix, Language, QueryRecord};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(r: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (*x as f64 / n) as f32).collect();
        }
    }
}

pub fn document(id: &str) -> Document {
    Document {
        doc_id: id.to_string(),
        title: format!("Paper {id}"),
        abstract_text: format!("We study topic {id} in depth and report results."),
        venue: "Synthetic Venue".into(),
        authors: vec!["A. Author".into()],
    }
}

/// A corpus where every query vector sits next to its gold document.
pub struct Synthetic {
    pub collection: Collection,
    pub queries: Vec<QueryRecord>,
    pub docs: EmbeddingMatrix,
    pub query_vectors: EmbeddingMatrix,
}

/// `n_queries` queries spread over three languages. Query `i` is a small
/// perturbation of document `i`, so its gold is its nearest neighbour.
pub fn synthetic(n_docs: usize, n_queries: usize, dim: usize, seed: u64) -> Synthetic {
    assert!(n_queries <= n_docs);
    let mut r = rng(seed);
    let doc_ids: Vec<String> = (0..n_docs).map(|i| format!("d{i:05}")).collect();
    let doc_rows: Vec<Vec<f32>> = (0..n_docs).map(|_| unit_vector(&mut r, dim)).collect();
    let langs = [Language::En, Language::De, Language::Fr];
    let queries: Vec<QueryRecord> = (0..n_queries)
        .map(|i| QueryRecord {
            query_id: format!("q{i:04}"),
            language: langs[i % 3],
            text_original: format!("Claim number {i} about topic d{i:05}."),
            text_translated: Some(format!("Translated claim {i}.")),
            gold_doc_id: Some(doc_ids[i].clone()),
        })
        .collect();
    let query_rows: Vec<Vec<f32>> = (0..n_queries)
        .map(|i| {
            let noise = unit_vector(&mut r, dim);
            doc_rows[i].iter().zip(&noise).map(|(a, b)| a + 0.01 * b).collect()
        })
        .collect();
    Synthetic {
        collection: Collection::from_documents(doc_ids.iter().map(|d| document(d)).collect()).unwrap(),
        docs: EmbeddingMatrix::from_rows(doc_ids.iter().zip(doc_rows)).unwrap(),
        query_vectors: EmbeddingMatrix::from_rows(queries.iter().map(|q| q.query_id.clone()).zip(query_rows)).unwrap(),
        queries,
    }
}

impl Synthetic {
    /// Writes collection.jsonl, queries.jsonl, docs.jsonl and query_vecs.jsonl.
    pub fn write(&self, dir: &Path) {
        write_collection(&dir.join("collection.jsonl"), &self.collection).unwrap();
        write_queries(&dir.join("queries.jsonl"), &self.queries).unwrap();
        write_jsonl_embeddings(&dir.join("docs.jsonl"), &self.docs).unwrap();
        write_jsonl_embeddings(&dir.join("query_vecs.jsonl"), &self.query_vectors).unwrap();
    }
}

/// One scripted HTTP reply.
pub type Reply = (u16, String);

/// Minimal HTTP/1.1 server answering each request with `respond(n, body)`,
/// where `n` counts requests from 0.
pub struct StubServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

pub fn stub_server<F>(respond: F) -> StubServer
where
    F: Fn(usize, &str) -> Reply + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let respond = Arc::new(respond);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let counter = counter.clone();
            let respond = respond.clone();
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, text) = respond(n, &String::from_utf8_lossy(&body));
                let reply = format!(
                    "HTTP/1.1 {status} Status\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            });
        }
    });
    StubServer { url, hits }
}

pub fn chat_reply(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

/// The user message of a chat request body.
pub fn prompt_of(body: &str) -> String {
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    v["messages"][0]["content"].as_str().unwrap().to_string()
}

/// Fixed judge case used by the prompt snapshots.
pub fn toy_case() -> sourcelab::judge::JudgeCase {
    use sourcelab::judge::{Candidate, JudgeCase};
    let docs = [
        ("123456", "Dense Passage Retrieval for Open-Domain Question Answering", "We show that retrieval can be practically implemented using dense representations alone.", Some(2)),
        ("234567", "Approximate Nearest Neighbor Negative Contrastive Learning", "We present ANCE, which selects hard training negatives globally from the entire corpus.", Some(4)),
        ("345678", "Silhouettes: a Graphical Aid to Cluster Analysis", "A new graphical display is proposed for partitioning techniques.", None),
        ("456789", "RankGPT: Large Language Models as Re-Ranking Agents", "We investigate generative LLMs for relevance ranking in information retrieval.", Some(7)),
        ("567890", "SciFact: Verifying Scientific Claims", "We introduce scientific claim verification, a new task to select abstracts that support or refute claims.", Some(1)),
    ];
    JudgeCase {
        query_id: "toy-1".into(),
        claim_text: "Dense retrievers trained with hard negatives outperform sparse baselines.".into(),
        candidates: docs
            .iter()
            .enumerate()
            .map(|(i, (id, title, abs, rank))| Candidate {
                letter: sourcelab::judge::letter_id(i),
                doc_id: id.to_string(),
                title: title.to_string(),
                abstract_text: abs.to_string(),
                retrieval_rank: *rank,
            })
            .collect(),
        baseline_doc_id: "123456".into(),
    }
}

pub const PROMPT_SEED: u64 = 2024;

pub fn golden_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}
