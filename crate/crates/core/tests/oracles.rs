mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use sourcelab::mining::eligible_candidates;
use sourcelab::run::{cluster_pools, mine_pools, retrieve};
use sourcelab::{
    mine, CandidatePool, FlatIndex, KRange, MiningRequest, MiningStrategy, PoolEntry, QuerySet, TrainingTriple,
};

fn pool(n: usize) -> CandidatePool {
    CandidatePool {
        query_id: "q".into(),
        entries: (1..=n)
            .map(|rank| PoolEntry {
                doc_id: format!("d{rank}"),
                similarity: 1.0 - rank as f64 / 100.0,
                rank,
            })
            .collect(),
    }
}

#[test]
fn ance_sampling_is_uniform() {
    // Gold at rank 1 and m = 1 leave ranks 2..=5 as the candidates.
    let p = pool(5);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for seed in 0..10_000u64 {
        let req = MiningRequest {
            strategy: MiningStrategy::Ance,
            negatives: 1,
            exclude_top_m: 1,
            seed,
        };
        let t = mine(&p, None, "d1", &req).unwrap();
        *counts.entry(t.negative_doc_ids[0].clone()).or_default() += 1;
    }
    assert_eq!(counts.keys().collect::<Vec<_>>(), ["d2", "d3", "d4", "d5"]);
    let sd = (10_000.0f64 * 0.25 * 0.75).sqrt();
    for (doc, c) in &counts {
        assert!((*c as f64 - 2500.0).abs() <= 3.0 * sd, "{doc}: {c} draws");
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn outputs_independent_of_worker_count() {
    let data = common::synthetic(300, 40, 12, 17);
    let set = QuerySet {
        queries: data.queries.clone(),
        unknown_language_count: 0,
    };
    let golds: BTreeMap<String, Option<String>> =
        data.queries.iter().map(|q| (q.query_id.clone(), q.gold_doc_id.clone())).collect();
    let run = |threads| {
        in_pool(threads, || {
            let (docs, pools) = retrieve(&data.collection, &set, &data.docs, &data.query_vectors, 30).unwrap();
            let clusterings = cluster_pools(&pools, &docs, &golds, KRange::default(), 9).unwrap();
            let mined =
                mine_pools(&pools, Some(&clusterings), &golds, MiningStrategy::ClusterNonGold, 5, 3, 9).unwrap();
            (pools, clusterings, mined.triples)
        })
    };
    let (p1, c1, t1) = run(1);
    let (p8, c8, t8) = run(8);
    assert_eq!(p1, p8);
    assert_eq!(c1, c8);
    assert_eq!(t1, t8);
}

#[test]
fn batch_search_matches_single_queries() {
    let data = common::synthetic(200, 25, 10, 4);
    let index = FlatIndex::build(data.docs.clone().normalize().unwrap()).unwrap();
    let q = data.query_vectors.clone().normalize().unwrap();
    let batch = index.batch_search(&q, 15).unwrap();
    for (i, p) in batch.iter().enumerate() {
        assert_eq!(p, &index.search_topk(&q.ids()[i], q.row(i), 15).unwrap());
    }
}

fn check_triple(p: &CandidatePool, gold: &str, m: usize, n: usize, t: &TrainingTriple) {
    let eligible: BTreeSet<&str> = eligible_candidates(p, gold, m).into_iter().collect();
    let negs: BTreeSet<&str> = t.negative_doc_ids.iter().map(String::as_str).collect();
    assert_eq!(negs.len(), t.negative_doc_ids.len(), "duplicate negatives");
    assert!(!negs.contains(gold));
    assert!(negs.is_subset(&eligible));
    assert!(t.negative_doc_ids.len() <= n);
    if t.negative_doc_ids.len() < n {
        assert!(t.flags.contains(&sourcelab::MiningFlag::Shortfall));
    }
}

proptest! {
    #[test]
    fn ance_negatives_respect_exclusions(size in 1usize..40, gold_rank in 1usize..40, m in 0usize..10, n in 1usize..12, seed: u64) {
        let p = pool(size);
        let gold = format!("d{gold_rank}");
        let req = MiningRequest { strategy: MiningStrategy::Ance, negatives: n, exclude_top_m: m, seed };
        let t = mine(&p, None, &gold, &req).unwrap();
        check_triple(&p, &gold, m, n, &t);
        let expected = eligible_candidates(&p, &gold, m).len().min(n);
        prop_assert_eq!(t.negative_doc_ids.len(), expected);
        prop_assert_eq!(&mine(&p, None, &gold, &req).unwrap(), &t);
    }

    #[test]
    fn cluster_negatives_respect_exclusions(seed in 0u64..200, m in 0usize..6, n in 1usize..8) {
        let data = common::synthetic(80, 3, 6, seed);
        let set = QuerySet { queries: data.queries.clone(), unknown_language_count: 0 };
        let golds: BTreeMap<String, Option<String>> =
            data.queries.iter().map(|q| (q.query_id.clone(), q.gold_doc_id.clone())).collect();
        let (docs, pools) = retrieve(&data.collection, &set, &data.docs, &data.query_vectors, 25).unwrap();
        let clusterings = cluster_pools(&pools, &docs, &golds, KRange::default(), seed).unwrap();
        for strategy in [MiningStrategy::ClusterGold, MiningStrategy::ClusterNearest, MiningStrategy::ClusterNonGold] {
            let run = mine_pools(&pools, Some(&clusterings), &golds, strategy, n, m, seed).unwrap();
            for t in &run.triples {
                let p = pools.iter().find(|p| p.query_id == t.query_id).unwrap();
                check_triple(p, &t.positive_doc_id, m, n, t);
            }
        }
    }
}
