//! `sourcelab` command-line front end.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 the judge
//! endpoint failed and fallback output was written.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sourcelab::cluster::{load_clusterings, write_clusterings};
use sourcelab::config::RunConfig;
use sourcelab::eval::{report_tsv, write_report_json, write_report_tsv};
use sourcelab::index::{load_pools, write_pools};
use sourcelab::judge::{run_judge, HttpJudge, JudgeBackend, NoEndpoint};
use sourcelab::mining::{export_inbatch_manifest, export_triples, MiningStrategy};
use sourcelab::model::{load_rankings, write_rankings};
use sourcelab::run::{
    cluster_pools, evaluate_stage, mine_pools, retrieve, run_pipeline, write_transcript, Manifest, PipelineInputs,
    StageSpec,
};
use sourcelab::{load_collection, load_embeddings, load_queries, EmbeddingFormat, Formulation, RankedList, Stage};

#[derive(Parser)]
#[command(name = "sourcelab", version, about = "Retrieve, mine, judge and evaluate scientific-source rankings")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,

    /// Manifest to record this stage in [default: manifest.json next to the output]
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// More logging; repeat for debug output
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Raw,
}

impl From<FormatArg> for EmbeddingFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Jsonl => EmbeddingFormat::Jsonl,
            FormatArg::Raw => EmbeddingFormat::Raw,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClaimArg {
    Original,
    Translated,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Retriever,
    Reranker,
}

/// Overrides for fields of the run configuration.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k_min: Option<usize>,
    #[arg(long, global = true)]
    k_max: Option<usize>,
    #[arg(long, global = true, alias = "pool-size")]
    pool_size_retrieve: Option<usize>,
    #[arg(long, global = true)]
    pool_size_rerank: Option<usize>,
    /// Which model the negatives train; sets the default negatives per query
    #[arg(long, global = true, value_enum)]
    side: Option<SideArg>,
    #[arg(short = 'n', long, global = true)]
    negatives_per_query: Option<usize>,
    #[arg(long, global = true)]
    exclude_top_m: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    judge_candidates: Option<usize>,
    #[arg(long, global = true)]
    truncate_units: Option<usize>,
    #[arg(long, global = true, value_enum)]
    claim_text: Option<ClaimArg>,
    /// direct, pairwise or listwise
    #[arg(long, global = true)]
    formulation: Option<Formulation>,
    /// Recall cutoffs, e.g. --recall-k 10 --recall-k 20
    #[arg(long = "recall-k", global = true)]
    recall_ks: Vec<usize>,
    #[arg(long, global = true)]
    judge_url: Option<String>,
    #[arg(long, global = true)]
    judge_model: Option<String>,
    #[arg(long, global = true)]
    judge_timeout_secs: Option<u64>,
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
}

#[derive(Args)]
struct EmbeddingArgs {
    #[arg(long)]
    doc_embeddings: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    embedding_format: FormatArg,
}

#[derive(Subcommand)]
enum Command {
    /// Exact top-k search of every query into a candidate pool
    Retrieve {
        #[arg(long)]
        collection: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        query_embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster each pool, choosing k by macro silhouette
    Cluster {
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine hard negatives and export training triples
    Mine {
        /// in-batch, ance, cluster-gold, cluster-nearest or cluster-non-gold
        #[arg(long)]
        strategy: Option<MiningStrategy>,
        #[arg(long)]
        queries: PathBuf,
        /// Not needed for in-batch export
        #[arg(long)]
        pools: Option<PathBuf>,
        /// Precomputed clusterings; otherwise pools are clustered here
        #[arg(long)]
        clusterings: Option<PathBuf>,
        #[arg(long)]
        doc_embeddings: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "jsonl")]
        embedding_format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// MRR@5 and Recall@K per language, with an agreement block when a
    /// retriever ranking is given
    Evaluate {
        #[arg(long)]
        queries: PathBuf,
        /// Rankings to score (pools files are accepted)
        #[arg(long)]
        rankings: PathBuf,
        /// Retriever rankings to compare top-1 choices against
        #[arg(long)]
        retriever: Option<PathBuf>,
        #[arg(long)]
        json: PathBuf,
        #[arg(long)]
        tsv: PathBuf,
    },
    /// Ask the judge about every retriever/reranker disagreement
    Judge {
        #[arg(long)]
        collection: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        retriever: PathBuf,
        #[arg(long)]
        reranker: PathBuf,
        /// FINAL rankings
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
    },
    /// retrieve, ingest reranker scores, judge and evaluate in one run
    Pipeline {
        #[arg(long)]
        collection: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        query_embeddings: PathBuf,
        /// TSV with header query_id, doc_id, score
        #[arg(long)]
        rerank_scores: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

enum Failure {
    Input(sourcelab::Error),
    Endpoint(usize),
}

impl From<sourcelab::Error> for Failure {
    fn from(e: sourcelab::Error) -> Self {
        Failure::Input(e)
    }
}

struct Loaded {
    config: RunConfig,
    file: Option<(PathBuf, String)>,
}

impl Loaded {
    fn file(&self) -> Option<(&Path, &str)> {
        self.file.as_ref().map(|(p, t)| (p.as_path(), t.as_str()))
    }
}

fn load_config(a: &ConfigArgs) -> sourcelab::Result<Loaded> {
    let (mut c, file) = match &a.config {
        Some(path) => {
            let text = sourcelab::io::read_text(path)?;
            let c = RunConfig::from_toml_str(&text)
                .map_err(|e| sourcelab::Error::Config(format!("{}: {e}", path.display())))?;
            (c, Some((path.clone(), text)))
        }
        None => (RunConfig::default(), None),
    };
    c.judge = c.judge.with_env()?;
    if let Some(v) = a.seed {
        c.rng_seed = v;
    }
    if a.k_min.is_some() || a.k_max.is_some() {
        c.k_range = sourcelab::KRange::new(a.k_min.unwrap_or(c.k_range.min), a.k_max.unwrap_or(c.k_range.max))?;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = a.$field { c.$field = v; })*};
    }
    set!(pool_size_retrieve, pool_size_rerank, exclude_top_m, batch_size, judge_candidates, truncate_units, formulation);
    if let Some(s) = a.side {
        c.side = match s {
            SideArg::Retriever => sourcelab::TrainingSide::Retriever,
            SideArg::Reranker => sourcelab::TrainingSide::Reranker,
        };
    }
    if let Some(n) = a.negatives_per_query {
        c.negatives_per_query = Some(n);
    }
    if let Some(t) = a.claim_text {
        c.claim_text = match t {
            ClaimArg::Original => sourcelab::ClaimText::Original,
            ClaimArg::Translated => sourcelab::ClaimText::Translated,
        };
    }
    if !a.recall_ks.is_empty() {
        c.recall_ks = a.recall_ks.clone();
    }
    if let Some(u) = &a.judge_url {
        c.judge.url = Some(u.clone());
    }
    if let Some(m) = &a.judge_model {
        c.judge.model = m.clone();
    }
    if let Some(t) = a.judge_timeout_secs {
        c.judge.timeout_secs = t;
    }
    if let Some(n) = a.max_in_flight {
        c.judge.max_in_flight = n;
    }
    c.validate()?;
    Ok(Loaded { config: c, file })
}

fn judge_backend(config: &RunConfig) -> sourcelab::Result<Box<dyn JudgeBackend>> {
    Ok(match config.judge.url {
        Some(_) => Box::new(HttpJudge::new(config.judge.clone())?),
        None => Box::new(NoEndpoint(format!(
            "no judge endpoint configured (set [judge].url, --judge-url or {})",
            sourcelab::judge::ENV_URL
        ))),
    })
}

fn open_manifest(cli_path: &Option<PathBuf>, out: &Path, loaded: &Loaded) -> sourcelab::Result<Manifest> {
    let path = cli_path.clone().unwrap_or_else(|| {
        out.parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join("manifest.json")
    });
    Manifest::open(&path, loaded.file())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let loaded = load_config(&cli.config)?;
    let cfg = &loaded.config;
    match cli.command {
        Command::Retrieve {
            collection,
            queries,
            emb,
            query_embeddings,
            out,
        } => {
            let mut manifest = open_manifest(&cli.manifest, &out, &loaded)?;
            let spec = StageSpec::new("retrieve")
                .arg("pool_size", cfg.pool_size_retrieve)
                .input("collection", &collection)
                .input("queries", &queries)
                .input("doc_embeddings", &emb.doc_embeddings)
                .input("query_embeddings", &query_embeddings)
                .output("pools", &out);
            manifest.run_stage(spec, cfg, || {
                let c = load_collection(&collection)?;
                let q = load_queries(&queries)?;
                let d = load_embeddings(&emb.doc_embeddings, emb.embedding_format.into())?;
                let qv = load_embeddings(&query_embeddings, emb.embedding_format.into())?;
                let (_, pools) = retrieve(&c, &q, &d, &qv, cfg.pool_size_retrieve)?;
                write_pools(&out, &pools)?;
                eprintln!("wrote {} pools -> {}", pools.len(), out.display());
                Ok(())
            })?;
        }
        Command::Cluster {
            pools,
            queries,
            emb,
            out,
        } => {
            let mut manifest = open_manifest(&cli.manifest, &out, &loaded)?;
            let spec = StageSpec::new("cluster")
                .arg("k_range", cfg.k_range)
                .input("pools", &pools)
                .input("queries", &queries)
                .input("doc_embeddings", &emb.doc_embeddings)
                .output("clusterings", &out);
            manifest.run_stage(spec, cfg, || {
                let p = load_pools(&pools)?;
                let q = load_queries(&queries)?;
                let d = load_embeddings(&emb.doc_embeddings, emb.embedding_format.into())?.normalize()?;
                let clusterings = cluster_pools(&p, &d, &q.golds(), cfg.k_range, cfg.rng_seed)?;
                write_clusterings(&out, &clusterings)?;
                let unclusterable = clusterings.iter().filter(|c| c.clustered().is_none()).count();
                eprintln!(
                    "clustered {} pools ({unclusterable} unclusterable) -> {}",
                    clusterings.len(),
                    out.display()
                );
                Ok(())
            })?;
        }
        Command::Mine {
            strategy,
            queries,
            pools,
            clusterings,
            doc_embeddings,
            embedding_format,
            out,
        } => {
            let strategy = strategy.unwrap_or(cfg.strategy);
            let mut manifest = open_manifest(&cli.manifest, &out, &loaded)?;
            let mut spec = StageSpec::new("mine")
                .arg("strategy", strategy)
                .arg("negatives_per_query", cfg.negatives())
                .arg("exclude_top_m", cfg.exclude_top_m)
                .input("queries", &queries)
                .output("triples", &out);
            for (role, p) in [("pools", &pools), ("clusterings", &clusterings), ("doc_embeddings", &doc_embeddings)] {
                if let Some(p) = p {
                    spec = spec.input(role, p);
                }
            }
            manifest.run_stage(spec, cfg, || {
                let q = load_queries(&queries)?;
                if strategy == MiningStrategy::InBatchExport {
                    let ids: Vec<&str> = q.queries.iter().map(|r| r.query_id.as_str()).collect();
                    let seed = sourcelab::seed::derive_seed(cfg.rng_seed, "in-batch", "");
                    let m = export_inbatch_manifest(&ids, cfg.batch_size, seed, &out)?;
                    eprintln!(
                        "{} queries in {} batches, {} in-batch negatives per query -> {}",
                        m.n_queries,
                        m.batches.len(),
                        m.in_batch_negatives_per_query,
                        out.display()
                    );
                    return Ok(());
                }
                let pools_path = pools
                    .as_ref()
                    .ok_or_else(|| sourcelab::Error::Invalid(format!("--pools is required for {strategy}")))?;
                let p = load_pools(pools_path)?;
                let golds = q.golds();
                let clustered = match (&clusterings, strategy.needs_clustering()) {
                    (_, false) => None,
                    (Some(path), true) => Some(load_clusterings(path)?),
                    (None, true) => {
                        let path = doc_embeddings.as_ref().ok_or_else(|| {
                            sourcelab::Error::Invalid(format!("{strategy} needs --clusterings or --doc-embeddings"))
                        })?;
                        let d = load_embeddings(path, embedding_format.into())?.normalize()?;
                        Some(cluster_pools(&p, &d, &golds, cfg.k_range, cfg.rng_seed)?)
                    }
                };
                let run = mine_pools(
                    &p,
                    clustered.as_deref(),
                    &golds,
                    strategy,
                    cfg.negatives(),
                    cfg.exclude_top_m,
                    cfg.rng_seed,
                )?;
                for s in &run.skipped {
                    log::warn!("skipped {}: {}", s.query_id, s.reason);
                }
                export_triples(&run.triples, &out)?;
                if !run.skipped.is_empty() {
                    eprintln!("skipped {} queries", run.skipped.len());
                }
                Ok(())
            })?;
        }
        Command::Evaluate {
            queries,
            rankings,
            retriever,
            json,
            tsv,
        } => {
            let mut manifest = open_manifest(&cli.manifest, &json, &loaded)?;
            let mut spec = StageSpec::new("evaluate")
                .arg("recall_ks", &cfg.recall_ks)
                .input("queries", &queries)
                .input("rankings", &rankings)
                .output("report_json", &json)
                .output("report_tsv", &tsv);
            if let Some(r) = &retriever {
                spec = spec.input("retriever", r);
            }
            manifest.run_stage(spec, cfg, || {
                let q = load_queries(&queries)?;
                let lists = load_rankings(&rankings, Stage::Retriever)?;
                let ret = retriever
                    .as_ref()
                    .map(|p| load_rankings(p, Stage::Retriever))
                    .transpose()?;
                let report = evaluate_stage(&lists, ret.as_deref(), &q, &cfg.recall_ks)?;
                write_report_json(&json, &report)?;
                write_report_tsv(&tsv, &report)?;
                print!("{}", report_tsv(&report));
                Ok(())
            })?;
        }
        Command::Judge {
            collection,
            queries,
            retriever,
            reranker,
            out,
            transcript,
        } => {
            let backend = judge_backend(cfg)?;
            let mut manifest = open_manifest(&cli.manifest, &out, &loaded)?;
            let spec = StageSpec::new("judge")
                .arg("formulation", cfg.formulation)
                .arg("judge_candidates", cfg.judge_candidates)
                .input("collection", &collection)
                .input("queries", &queries)
                .input("retriever", &retriever)
                .input("reranker", &reranker)
                .output("final", &out)
                .output("transcript", &transcript);
            let stats = manifest.run_stage(spec, cfg, || {
                let c = load_collection(&collection)?;
                let q = load_queries(&queries)?;
                let ret: Vec<RankedList> = load_rankings(&retriever, Stage::Retriever)?;
                let rer: Vec<RankedList> = load_rankings(&reranker, Stage::Reranker)?;
                let run = run_judge(
                    &ret,
                    &rer,
                    &q,
                    &c,
                    &cfg.judge_settings(),
                    backend.as_ref(),
                    cfg.judge.max_in_flight,
                )?;
                write_rankings(&out, &run.finals)?;
                write_transcript(&transcript, &run)?;
                Ok(run.stats)
            })?;
            report_judge(&stats);
            if stats.endpoint_fail > 0 {
                return Err(Failure::Endpoint(stats.endpoint_fail));
            }
        }
        Command::Pipeline {
            collection,
            queries,
            emb,
            query_embeddings,
            rerank_scores,
            out_dir,
        } => {
            let backend = judge_backend(cfg)?;
            let inputs = PipelineInputs {
                collection,
                queries,
                doc_embeddings: emb.doc_embeddings,
                query_embeddings,
                embedding_format: emb.embedding_format.into(),
                rerank_scores,
            };
            let summary = run_pipeline(&inputs, cfg, loaded.file(), backend.as_ref(), &out_dir)?;
            report_judge(&summary.judge);
            print!("{}", report_tsv(&summary.final_report));
            if summary.judge.endpoint_fail > 0 {
                return Err(Failure::Endpoint(summary.judge.endpoint_fail));
            }
        }
    }
    Ok(())
}

fn report_judge(s: &sourcelab::judge::JudgeStats) {
    eprintln!(
        "{} queries, {} disagreements judged: {} ok, {} parse failures, {} context failures, {} endpoint failures ({} fell back)",
        s.n_queries, s.n_disagreements, s.parse_ok, s.parse_fail, s.context_fail, s.endpoint_fail, s.fell_back
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Endpoint(n)) => {
            eprintln!("error: judge endpoint failed on {n} cases; the reranker's top-1 was kept for them");
            ExitCode::from(3)
        }
    }
}
