use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tkl::bench::{attention_cost, run_benchmark, write_bench_csv, write_cost_csv, BenchConfig};
use tkl::config::RunConfig;
use tkl::eval::{
    length_bias, quality_vs_maxlen, read_regions, region_positions, rerank_parallel, summarize, write_length_bias_csv,
    write_quality_csv, write_region_positions_csv, write_regions, Bins, Qrels, RunFile,
};
use tkl::text::{
    compute_idf, ingest_corpus, ingest_queries, ingest_triples, load_embeddings, DocumentStore, QueryStore,
    Strictness, Vocabulary,
};
use tkl::train::{gradient_check, load_checkpoint, probe_model, save_checkpoint, train, GradCheckConfig, TrainingData, Validation};
use tkl::{Model, Result, TklError};

/// Exit status when a gradient check finds a mismatch.
const GRADCHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "tkl", version, about = "Transformer-kernel re-ranking of long documents")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set model.window=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for re-ranking (default 1).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-passage demo collection and a matching config.
    Synthetic(SyntheticArgs),
    /// Train a model on pairwise triples.
    Train(TrainArgs),
    /// Re-rank a candidate run with a trained model.
    Rerank(RerankArgs),
    /// nDCG@10, MRR@10 and MAP@100 of one or more runs.
    Eval(EvalArgs),
    /// Length-bias, region-position and truncation tables.
    Analyze(AnalyzeArgs),
    /// Attention cost table and encoder throughput.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory; falls back to `paths.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Candidate run to re-rank.
    #[arg(long)]
    run: PathBuf,
    /// Re-ranked run output.
    #[arg(long)]
    out: PathBuf,
    /// Also write the selected regions of every document as JSON lines.
    #[arg(long)]
    regions: Option<PathBuf>,
    /// Truncation length; the model's `max_doc_len` when omitted.
    #[arg(long)]
    max_doc_len: Option<usize>,
    /// Run tag written in the last column.
    #[arg(long, default_value = "tkl")]
    tag: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    qrels: PathBuf,
    /// `PATH` or `NAME=PATH`; repeatable.
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    qrels: PathBuf,
    /// `PATH` or `NAME=PATH`; repeatable.
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    /// Region records written by `rerank --regions`.
    #[arg(long)]
    regions: Option<PathBuf>,
    /// With a checkpoint, re-rank the first run at every `eval.max_doc_lens`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained model; a randomly initialised one from the config otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Only write the closed-form cost table.
    #[arg(long)]
    cost_only: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    ffn: usize,
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    query_len: usize,
    #[arg(long, default_value_t = 120)]
    doc_len: usize,
    /// Check every saturation mode instead of the configured one.
    #[arg(long)]
    all_modes: bool,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(w) = cli.workers {
        cfg.workers = w;
        cfg.validate()?;
    }
    match cli.command {
        Command::Synthetic(a) => synthetic(&cfg, &a)?,
        Command::Train(a) => train_cmd(&cfg, &a)?,
        Command::Rerank(a) => rerank_cmd(&cfg, &a)?,
        Command::Eval(a) => eval_cmd(&cfg, &a)?,
        Command::Analyze(a) => analyze_cmd(&cfg, &a)?,
        Command::Bench(a) => bench_cmd(&cfg, &a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(&cfg, &a),
    }
    Ok(ExitCode::SUCCESS)
}

fn strictness(cfg: &RunConfig) -> Strictness {
    if cfg.lenient {
        Strictness::Lenient
    } else {
        Strictness::Strict
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| TklError::Config(format!("`paths.{key}` is not set (use --set paths.{key}=...)")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| TklError::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| TklError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| TklError::io(path, e))
}

fn named_runs(args: &[String]) -> Result<Vec<(String, RunFile)>> {
    args
        .iter()
        .map(|arg| {
            let (name, path) = match arg.split_once('=') {
                Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                None => {
                    let p = PathBuf::from(arg);
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    (stem, p)
                }
            };
            Ok((name, RunFile::load(&path)?))
        })
        .collect()
}

fn text_stores(cfg: &RunConfig, vocab: &Vocabulary) -> Result<(QueryStore, DocumentStore)> {
    let queries = ingest_queries(required(&cfg.paths.queries, "queries")?, vocab, strictness(cfg))?;
    let docs = ingest_corpus(required(&cfg.paths.corpus, "corpus")?, vocab, strictness(cfg))?;
    log::info!("loaded {} queries and {} documents", queries.len(), docs.len());
    Ok((queries, docs))
}

fn model_from(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let path = checkpoint
        .or(cfg.paths.checkpoint.as_deref())
        .ok_or_else(|| TklError::Config("no checkpoint given (use --checkpoint or paths.checkpoint)".into()))?;
    load_checkpoint(path)
}

fn synthetic(cfg: &RunConfig, args: &SyntheticArgs) -> Result<()> {
    let task = tkl::synthetic::generate(&cfg.synthetic)?;
    task.write_to(&args.out)?;
    let mut demo = cfg.clone();
    demo.model.embedding_dim = cfg.synthetic.embedding_dim;
    demo.model.layers = 1;
    demo.model.heads = 2;
    demo.model.ffn_dim = cfg.synthetic.embedding_dim;
    demo.train.lr_other = 1e-2;
    demo.train.batch_size = 8;
    demo.train.validate_every = 40;
    let at = |name: &str| Some(args.out.join(name));
    demo.paths.embeddings = at("embeddings.txt");
    demo.paths.corpus = at("corpus.tsv");
    demo.paths.queries = at("queries.tsv");
    demo.paths.triples = at("triples.tsv");
    demo.paths.validation_run = at("validation.run");
    demo.paths.validation_qrels = at("qrels.txt");
    demo.paths.output_dir = at("model");
    demo.paths.checkpoint = Some(args.out.join("model").join("model.ckpt"));
    demo.validate()?;
    let path = demo.echo(&args.out)?;
    println!(
        "wrote {} documents, {} queries, {} triples and {} to {}",
        task.docs.len(),
        task.queries.len(),
        task.triples.len(),
        path.display(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let out = args
        .out
        .as_deref()
        .or(cfg.paths.output_dir.as_deref())
        .ok_or_else(|| TklError::Config("no output directory (use --out or paths.output_dir)".into()))?;
    let (vocab, table) = load_embeddings(required(&cfg.paths.embeddings, "embeddings")?)?;
    let (queries, docs) = text_stores(cfg, &vocab)?;
    let triples = ingest_triples(required(&cfg.paths.triples, "triples")?, &queries, &docs, strictness(cfg))?;
    let validation_inputs = match (&cfg.paths.validation_run, &cfg.paths.validation_qrels) {
        (Some(r), Some(q)) => Some((RunFile::load(r)?, Qrels::load(q)?)),
        (None, None) => None,
        _ => {
            return Err(TklError::Config(
                "paths.validation_run and paths.validation_qrels must be set together".into(),
            ))
        }
    };
    let salience = if cfg.idf_salience {
        Some(compute_idf(docs.iter().map(|d| d.tokens.as_slice()), vocab.len())?)
    } else {
        None
    };
    let model = Model::new(cfg.model.clone(), vocab, Some(table), salience, cfg.seed)?;
    let data = TrainingData {
        queries: &queries,
        docs: &docs,
        triples: &triples,
        validation: validation_inputs.as_ref().map(|(run, qrels)| Validation { run, qrels }),
    };
    cfg.echo(out)?;
    let (best, log) = train(model, &data, &cfg.train, Some(&out.join("checkpoints")))?;
    let model_path = out.join("model.ckpt");
    save_checkpoint(&best, &model_path)?;
    let log_path = out.join("train_log.json");
    let mut w = create(&log_path)?;
    serde_json::to_writer_pretty(&mut w, &log).map_err(|e| TklError::io(&log_path, e.into()))?;
    finish(w, &log_path)?;
    match &log.best {
        Some(b) => println!(
            "{} steps; best validation nDCG@10 {:.4} at epoch {} step {}; model written to {}",
            log.steps.len(),
            b.ndcg_10,
            b.epoch,
            b.step,
            model_path.display()
        ),
        None => println!("{} steps; model written to {}", log.steps.len(), model_path.display()),
    }
    Ok(())
}

fn rerank_cmd(cfg: &RunConfig, args: &RerankArgs) -> Result<()> {
    let model = model_from(cfg, args.checkpoint.as_deref())?;
    let run = RunFile::load(&args.run)?;
    let (queries, docs) = text_stores(cfg, &model.vocab)?;
    let max_len = args.max_doc_len.unwrap_or(model.config.max_doc_len);
    let (mut reranked, records) = rerank_parallel(&model, &run, &queries, &docs, max_len, cfg.workers)?;
    reranked.tag = args.tag.clone();
    reranked.save(&args.out)?;
    if let Some(path) = &args.regions {
        let mut w = create(path)?;
        write_regions(&records, &mut w).map_err(|e| TklError::io(path, e))?;
        finish(w, path)?;
    }
    println!("re-ranked {} candidates for {} queries into {}", reranked.len(), reranked.queries().count(), args.out.display());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let qrels = Qrels::load(&args.qrels)?;
    let runs = named_runs(&args.runs)?;
    let width = runs.iter().map(|(n, _)| n.len()).max().unwrap_or(3).max(3);
    println!("{:width$}  {:>8}  {:>8}  {:>8}  {:>7}", "run", "nDCG@10", "MRR@10", "MAP@100", "queries");
    let mut csv_rows = Vec::new();
    for (name, run) in &runs {
        let s = summarize(run, &qrels, &cfg.eval.metrics);
        println!(
            "{name:width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>7}",
            s.ndcg_10, s.mrr_10, s.map_100, s.evaluated_queries
        );
        csv_rows.push(format!("{name},{},{},{},{}", s.ndcg_10, s.mrr_10, s.map_100, s.evaluated_queries));
    }
    if let Some(path) = &args.csv {
        let mut w = create(path)?;
        let io = |e| TklError::io(path, e);
        writeln!(w, "run,ndcg_10,mrr_10,map_100,queries").map_err(io)?;
        for row in csv_rows {
            writeln!(w, "{row}").map_err(io)?;
        }
        finish(w, path)?;
    }
    Ok(())
}

fn analyze_cmd(cfg: &RunConfig, args: &AnalyzeArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| TklError::io(&args.out, e))?;
    cfg.echo(&args.out)?;
    let qrels = Qrels::load(&args.qrels)?;
    let runs = named_runs(&args.runs)?;
    let empty = Vocabulary::new();
    let corpus = ingest_corpus(required(&cfg.paths.corpus, "corpus")?, &empty, strictness(cfg))?;
    let lengths: HashMap<String, usize> = corpus.raw_lengths();

    let bins = Bins::new(cfg.eval.length_bins.clone())?;
    let reports = runs
        .iter()
        .map(|(name, run)| {
            length_bias(run, &qrels, &lengths, cfg.eval.retrieval_depth, &bins, &cfg.eval.metrics)
                .map(|r| (name.as_str(), r))
        })
        .collect::<Result<Vec<_>>>()?;
    let borrowed: Vec<(&str, &_)> = reports.iter().map(|(n, r)| (*n, r)).collect();
    let path = args.out.join("length_bias.csv");
    let mut w = create(&path)?;
    write_length_bias_csv(&borrowed, &mut w)?;
    finish(w, &path)?;
    println!("wrote {}", path.display());

    if let Some(regions) = &args.regions {
        let file = File::open(regions).map_err(|e| TklError::io(regions, e))?;
        let records = read_regions(std::io::BufReader::new(file), &regions.display().to_string())?;
        let report = region_positions(
            &records,
            cfg.eval.region_ranks,
            &Bins::new(cfg.eval.region_bins.clone())?,
            cfg.eval.region_cutoff,
        );
        let path = args.out.join("region_positions.csv");
        let mut w = create(&path)?;
        write_region_positions_csv(&report, &mut w)?;
        finish(w, &path)?;
        for r in &report.ranks {
            println!(
                "region rank {}: {:.3} of {} start after token {}",
                r.rank, r.fraction_beyond, r.total, cfg.eval.region_cutoff
            );
        }
        println!("wrote {}", path.display());
    }

    if let Some(ckpt) = &args.checkpoint {
        let model = load_checkpoint(ckpt)?;
        let (queries, docs) = text_stores(cfg, &model.vocab)?;
        let rows = quality_vs_maxlen(
            &model,
            &runs[0].1,
            &queries,
            &docs,
            &qrels,
            &cfg.eval.max_doc_lens,
            &cfg.eval.metrics,
        )?;
        for r in &rows {
            println!("max_doc_len {:>6}: nDCG@10 {:.4}", r.max_len, r.ndcg_10);
        }
        let path = args.out.join("quality_vs_length.csv");
        let mut w = create(&path)?;
        write_quality_csv(&rows, &mut w)?;
        finish(w, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn bench_cmd(cfg: &RunConfig, args: &BenchArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| TklError::io(&args.out, e))?;
    cfg.echo(&args.out)?;
    let model = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => probe_model(cfg.model.clone(), 1000, 0, 0, cfg.seed)?.0,
    };
    let costs = cfg
        .bench
        .cost_lengths
        .iter()
        .map(|&l| attention_cost(l, model.config.window, model.config.overlap))
        .collect::<Result<Vec<_>>>()?;
    let path = args.out.join("attention_cost.csv");
    let mut w = create(&path)?;
    write_cost_csv(&costs, &mut w)?;
    finish(w, &path)?;
    for c in &costs {
        println!(
            "L={:>6}: full {:>12} windowed {:>10} ({} windows)",
            c.length, c.full_entries, c.windowed_entries, c.windows
        );
    }
    println!("wrote {}", path.display());
    if args.cost_only {
        return Ok(());
    }

    let longest = cfg.bench.cost_lengths.iter().copied().max().unwrap_or(model.config.max_doc_len);
    let (query, docs) = bench_inputs(cfg, &model, longest)?;
    let mut rows = Vec::new();
    for &len in &cfg.bench.cost_lengths {
        let run_cfg = BenchConfig {
            max_doc_len: len,
            ..cfg.bench.run.clone()
        };
        let row = run_benchmark(&model, &query, &docs, &run_cfg)?;
        println!(
            "max_doc_len {:>6}: {:.2} ms median per batch of {}, {} of {} windows skipped",
            len,
            row.median_ms,
            row.batch_size,
            row.windows_skipped,
            row.windows_computed + row.windows_skipped
        );
        rows.push(row);
    }
    let path = args.out.join("bench.csv");
    let mut w = create(&path)?;
    write_bench_csv(&rows, &mut w)?;
    finish(w, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// The first query and up to `bench.sample_docs` corpus documents when a
/// corpus is configured; random token sequences otherwise.
fn bench_inputs(cfg: &RunConfig, model: &Model, longest: usize) -> Result<(Vec<u32>, Vec<Vec<u32>>)> {
    if cfg.paths.corpus.is_some() && cfg.paths.queries.is_some() {
        let (queries, docs) = text_stores(cfg, &model.vocab)?;
        let query = queries
            .iter()
            .next()
            .map(|q| q.tokens.clone())
            .ok_or_else(|| TklError::Empty("query file has no queries".into()))?;
        let docs: Vec<Vec<u32>> = docs.iter().take(cfg.bench.sample_docs).map(|d| d.tokens.clone()).collect();
        if docs.is_empty() {
            return Err(TklError::Empty("corpus has no documents".into()));
        }
        return Ok((query, docs));
    }
    let vocab = model.vocab.len();
    let mut docs = Vec::with_capacity(cfg.bench.sample_docs);
    for i in 0..cfg.bench.sample_docs.max(1) {
        let (_, _, d) = probe_model(
            tkl::ModelConfig {
                embedding_dim: 2,
                layers: 1,
                heads: 1,
                ffn_dim: 2,
                ..tkl::ModelConfig::default()
            },
            vocab.saturating_sub(2).max(1),
            1,
            longest,
            cfg.seed.wrapping_add(i as u64),
        )?;
        docs.push(d);
    }
    let query = (2..vocab.min(7) as u32).collect::<Vec<_>>();
    Ok((if query.is_empty() { vec![1] } else { query }, docs))
}

fn gradcheck_cmd(cfg: &RunConfig, args: &GradcheckArgs) -> Result<ExitCode> {
    let modes = if args.all_modes {
        vec![
            tkl::scoring::SaturationMode::Embedding,
            tkl::scoring::SaturationMode::Log,
            tkl::scoring::SaturationMode::Linear,
        ]
    } else {
        vec![cfg.model.saturation]
    };
    let check = GradCheckConfig {
        tolerance: args.tolerance,
        ..GradCheckConfig::default()
    };
    let mut all_passed = true;
    for mode in modes {
        let config = tkl::ModelConfig {
            embedding_dim: args.dim,
            layers: args.layers,
            heads: args.heads,
            ffn_dim: args.ffn,
            saturation: mode,
            ..cfg.model.clone()
        };
        let (model, query, doc) = probe_model(config, args.vocab, args.query_len, args.doc_len, cfg.seed)?;
        let report = gradient_check(&model, &query, &doc, &check);
        println!("saturation {mode:?}: {} parameters", model.params.scalar_count());
        for c in &report.components {
            println!(
                "  {:<16} {:>6} checked {:>3} skipped  max rel {:.2e}  max abs {:.2e}  worst {:<28} {}",
                c.component.name(),
                c.checked,
                c.skipped,
                c.max_rel_error,
                c.max_abs_error,
                c.worst,
                if c.passed { "ok" } else { "MISMATCH" }
            );
        }
        all_passed &= report.passed;
    }
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        eprintln!("error[gradient]: analytic and numerical gradients disagree");
        ExitCode::from(GRADCHECK_FAILED)
    })
}
