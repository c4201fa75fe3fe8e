mod common;

use std::sync::atomic::Ordering;

use rand::Rng;
use sourcelab::judge::{run_judge, CallReply, EndpointConfig, HttpJudge, JudgeBackend, JudgeSettings};
use sourcelab::{CandidatePool, Formulation, ParseStatus, QuerySet, RankedList, Stage};

use common::{chat_reply, prompt_of, stub_server};

fn judge(url: &str) -> HttpJudge {
    HttpJudge::new(EndpointConfig {
        url: Some(url.to_string()),
        model: "stub-model".into(),
        token: Some("secret".into()),
        timeout_secs: 5,
        max_attempts: 3,
        backoff_ms: 1,
        max_in_flight: 2,
    })
    .unwrap()
}

#[test]
fn retries_after_rate_limit() {
    let server = stub_server(|n, _| if n < 2 { (429, "{}".into()) } else { (200, chat_reply("{\"selected_id\": \"C\"}")) });
    let result = judge(&server.url).complete("hello");
    assert_eq!(result.reply, CallReply::Text("{\"selected_id\": \"C\"}".into()));
    assert_eq!(result.attempts, 3);
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn server_errors_exhaust_retries() {
    let server = stub_server(|_, _| (503, "busy".into()));
    let result = judge(&server.url).complete("hello");
    assert!(matches!(result.reply, CallReply::Failed(ref m) if m.contains("503")));
    assert_eq!(result.attempts, 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = stub_server(|_, _| (404, "no such model".into()));
    let result = judge(&server.url).complete("hello");
    assert!(matches!(result.reply, CallReply::Failed(_)));
    assert_eq!(result.attempts, 1);
}

#[test]
fn over_length_prompt_is_context_failure() {
    let server = stub_server(|_, _| (413, "payload too large".into()));
    assert!(matches!(judge(&server.url).complete("x").reply, CallReply::ContextExceeded(_)));

    let server = stub_server(|_, _| {
        (400, r#"{"error":{"code":"context_length_exceeded","message":"maximum context length is 4096"}}"#.into())
    });
    let result = judge(&server.url).complete("x");
    assert!(matches!(result.reply, CallReply::ContextExceeded(_)));
    assert_eq!(result.attempts, 1);
}

#[test]
fn malformed_body_fails() {
    let server = stub_server(|_, _| (200, "not json".into()));
    assert!(matches!(judge(&server.url).complete("x").reply, CallReply::Failed(_)));
}

#[test]
fn request_body_shape() {
    let server = stub_server(|_, body| {
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        let ok = v["model"] == "stub-model"
            && v["temperature"] == 0
            && v["messages"][0]["role"] == "user"
            && v["messages"].as_array().unwrap().len() == 1;
        (200, chat_reply(if ok { &v["messages"][0]["content"].as_str().unwrap() } else { "bad" }))
    });
    let result = judge(&server.url).complete("echo me");
    assert_eq!(result.reply, CallReply::Text("echo me".into()));
}

#[test]
fn unreachable_endpoint_fails_after_retries() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    drop(listener);
    let result = judge(&url).complete("x");
    assert!(matches!(result.reply, CallReply::Failed(ref m) if m.contains("transport")));
    assert_eq!(result.attempts, 3);
}

#[test]
fn missing_url_is_config_error() {
    assert!(HttpJudge::new(EndpointConfig::default()).is_err());
}

struct Fixture {
    data: common::Synthetic,
    set: QuerySet,
    retriever: Vec<RankedList>,
    reranker: Vec<RankedList>,
}

fn fixture() -> Fixture {
    let data = common::synthetic(120, 30, 8, 11);
    let set = QuerySet {
        queries: data.queries.clone(),
        unknown_language_count: 0,
    };
    let (_, pools) = sourcelab::run::retrieve(&data.collection, &set, &data.docs, &data.query_vectors, 20).unwrap();
    let retriever: Vec<RankedList> = pools.iter().map(CandidatePool::to_ranked_list).collect();
    let mut r = common::rng(5);
    let reranker = pools
        .iter()
        .map(|p| {
            let scores = p.truncated(10).entries.into_iter().map(|e| (e.doc_id, r.random::<f64>()));
            RankedList::from_scores(p.query_id.clone(), scores, Stage::Reranker).unwrap()
        })
        .collect();
    Fixture {
        data,
        set,
        retriever,
        reranker,
    }
}

#[test]
fn judge_over_http_promotes_the_pick() {
    let f = fixture();
    let server = stub_server(|_, body| {
        assert!(prompt_of(body).contains("selected_id"));
        (200, chat_reply("{\"selected_id\": \"B\"}"))
    });
    let http = judge(&server.url);
    let settings = JudgeSettings {
        formulation: Formulation::Direct,
        ..JudgeSettings::default()
    };
    let run = run_judge(&f.retriever, &f.reranker, &f.set, &f.data.collection, &settings, &http, 2).unwrap();
    assert!(run.stats.n_disagreements > 0);
    assert_eq!(run.stats.n_calls, server.hits.load(Ordering::SeqCst));
    assert_eq!(run.stats.parse_ok, run.stats.n_disagreements);
    for entry in &run.transcript {
        let b = &entry.candidates.iter().find(|(l, _)| l == "B").unwrap().1;
        let fin = run.finals.iter().find(|l| l.query_id == entry.query_id).unwrap();
        assert_eq!(fin.top(), Some(b.as_str()));
        assert_eq!(entry.selected_doc_id.as_ref(), Some(b));
    }
}

#[test]
fn failing_endpoint_falls_back_to_reranker() {
    let f = fixture();
    let server = stub_server(|_, _| (500, "down".into()));
    let http = judge(&server.url);
    let run = run_judge(&f.retriever, &f.reranker, &f.set, &f.data.collection, &JudgeSettings::default(), &http, 2)
        .unwrap();
    assert!(run.stats.n_disagreements > 0);
    assert_eq!(run.stats.endpoint_fail, run.stats.n_disagreements);
    assert_eq!(run.stats.fell_back, run.stats.n_disagreements);
    for o in &run.outcomes {
        assert_eq!(o.parse_status, ParseStatus::ParseFail);
        assert_eq!(o.attempts, 3);
        assert!(o.error.is_some());
    }
    for (fin, rer) in run.finals.iter().zip(&f.reranker) {
        assert_eq!(fin.top(), rer.top());
    }
}
