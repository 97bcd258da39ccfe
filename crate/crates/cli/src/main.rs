use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use varietyir::corpus::{format_queries_tsv, load_collection, load_qrels, load_queries, read_run, write_run, LoadOptions, RecordFormat};
use varietyir::eval::parse_metric_list;
use varietyir::experiment::{Experiment, ExperimentConfig, Ranker, Suite};
use varietyir::neural::{load_params, rerank, save_params, search_dense, EncodedCorpus, EncoderError, EncoderParams, ScoringMode};
use varietyir::{
    build_triplets, compare_runs, evaluate_run, parse_ruleset, train, transduce_queryset, InvertedIndex, MetricSpec, Run,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "varietyir", version, about = "Cross-variety retrieval robustness and transfer experiments")]
struct Cli {
    /// Experiment config (`key = value` lines); missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index snapshot from a collection.
    Index {
        #[arg(long)]
        collection: PathBuf,
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve for every query and write a TREC run.
    Search(SearchArgs),
    /// Rewrite queries into a variety with a rule file.
    Transduce {
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the encoder with InfoNCE on (query, positive, negatives) triplets.
    Train(TrainArgs),
    /// Score a run against qrels; writes per-query and mean values as CSV.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Comma-separated metrics; defaults to the config's metric list.
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-query deltas (b − a) and an exact sign test for one metric.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Defaults to the config's report metric.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run research-question stages on synthetic data.
    Experiment(ExperimentArgs),
    /// Print the effective experiment config in canonical form.
    Config,
}

#[derive(Args)]
struct FormatArgs {
    /// Record format of collection and query files.
    #[arg(long, default_value = "tsv")]
    format: RecordFormat,
}

impl FormatArgs {
    fn options(&self) -> LoadOptions {
        LoadOptions::with_format(self.format)
    }
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, value_parser = parse_ranker, default_value = "bm25")]
    ranker: Ranker,
    #[arg(long)]
    queries: PathBuf,
    /// Collection file; required for neural rankers and when no index is given.
    #[arg(long)]
    collection: Option<PathBuf>,
    /// BM25 index snapshot from `index`.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Encoder checkpoint for single_vector, multi_vector and the rerank first stage.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Encoder checkpoint for the rerank MaxSim stage; defaults to `--params`.
    #[arg(long)]
    rerank_params: Option<PathBuf>,
    /// Seed of the untrained encoder used when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Retrieval depth; defaults to the config's retrieval depth.
    #[arg(long)]
    depth: Option<usize>,
    #[command(flatten)]
    format: FormatArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossMode {
    SingleVector,
    MultiVector,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    collection: PathBuf,
    /// Training queries, already in the target variety.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Starting checkpoint; an untrained encoder seeded with `--seed` otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "single-vector")]
    mode: LossMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    format: FormatArgs,
    /// Output checkpoint; the loss curve is written next to it as `<out>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    stage: Stage,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict the experiment to one ranker.
    #[arg(long, value_parser = parse_ranker)]
    ranker: Option<Ranker>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Rq1,
    Rq2,
    Rq3,
    Rq4,
    All,
}

fn parse_ranker(s: &str) -> Result<Ranker, String> {
    s.parse()
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    Ok(ExperimentConfig::parse(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn encoder(path: Option<&Path>, cfg: &ExperimentConfig, seed: u64) -> Result<EncoderParams> {
    Ok(match path {
        Some(p) => load_params(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
        None => EncoderParams::init(cfg.hasher, cfg.dim, seed)?,
    })
}

fn search(args: &SearchArgs, cfg: &ExperimentConfig) -> Result<()> {
    let opts = args.format.options();
    let queries = load_queries(&args.queries, &opts)?;
    let depth = args.depth.unwrap_or(cfg.retrieval_depth);
    let collection = args.collection.as_ref().map(|p| load_collection(p, &opts)).transpose()?;
    let mut run = Run::new(args.ranker.to_string());
    if args.ranker == Ranker::Bm25 {
        let index = match (&args.index, &collection) {
            (Some(p), _) => InvertedIndex::load(p)?,
            (None, Some(c)) => InvertedIndex::build(c, &cfg.analyzer)?,
            (None, None) => bail!("bm25 needs --index or --collection"),
        };
        for q in queries.iter() {
            run.insert(q.query_id.clone(), index.search(&q.text, cfg.bm25, depth));
        }
    } else {
        let Some(collection) = collection else {
            bail!("{} needs --collection", args.ranker);
        };
        let first = encoder(args.params.as_deref(), cfg, args.seed)?;
        let first_mode = match args.ranker {
            Ranker::MultiVector => ScoringMode::MultiVectorMaxSim,
            _ => ScoringMode::SingleVector,
        };
        let first_corpus = EncodedCorpus::encode(&collection, &first, &cfg.analyzer)?;
        let second = match args.ranker {
            Ranker::Rerank => {
                let p = encoder(args.rerank_params.as_deref().or(args.params.as_deref()), cfg, args.seed)?;
                let c = EncodedCorpus::encode(&collection, &p, &cfg.analyzer)?;
                Some((p, c))
            }
            _ => None,
        };
        for q in queries.iter() {
            let ranking = match first.encode(&q.text, &cfg.analyzer) {
                Err(EncoderError::EmptyText) => Vec::new(),
                Err(e) => return Err(e.into()),
                Ok(qe) => {
                    let base = search_dense(&qe, &first_corpus, first_mode, depth)?.ranking;
                    match &second {
                        Some((p, c)) => rerank(&base, &p.encode(&q.text, &cfg.analyzer)?, c, cfg.rerank_depth)?,
                        None => base,
                    }
                }
            };
            run.insert(q.query_id.clone(), ranking);
        }
    }
    write_run(&run, &args.out)?;
    eprintln!("wrote {} rankings to {}", run.rankings.len(), args.out.display());
    Ok(())
}

fn train_cmd(args: &TrainArgs, cfg: &ExperimentConfig) -> Result<()> {
    let opts = args.format.options();
    let collection = load_collection(&args.collection, &opts)?;
    let queries = load_queries(&args.queries, &opts)?;
    let qrels = load_qrels(&args.qrels)?;
    let tc = TrainConfig {
        seed: args.seed,
        loss_mode: match args.mode {
            LossMode::SingleVector => ScoringMode::SingleVector,
            LossMode::MultiVector => ScoringMode::MultiVectorMaxSim,
        },
        ..cfg.train.clone()
    };
    let init = encoder(args.init.as_deref(), cfg, args.seed)?;
    let index = InvertedIndex::build(&collection, &cfg.analyzer)?;
    let set = build_triplets(&queries, &qrels, &collection, &tc, &index, cfg.bm25)?;
    let (params, report) = train(&init, &set.triplets, &collection, &cfg.analyzer, &tc)?;
    save_params(&params, &args.out)?;
    let mut loss_path = args.out.clone().into_os_string();
    loss_path.push(".loss.csv");
    write_text(Path::new(&loss_path), &report.to_csv())?;
    eprintln!(
        "trained on {} triplets ({} queries skipped), {} steps; final loss {:.6}",
        set.triplets.len(),
        set.skipped_queries,
        report.steps,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn experiment(args: &ExperimentArgs, mut cfg: ExperimentConfig) -> Result<()> {
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(r) = args.ranker {
        cfg.rankers = vec![r];
    }
    let stage = args.stage;
    let wants = |s: Stage| stage == s || stage == Stage::All;
    if (wants(Stage::Rq2) || wants(Stage::Rq3) || wants(Stage::Rq4)) && !cfg.rankers.iter().any(|r| r.is_neural()) {
        bail!("fine-tuning stages need at least one neural ranker");
    }
    let dir = cfg.output_dir.clone();
    let mut exp = Experiment::new(cfg)?;
    let suite: Suite = exp.run(wants(Stage::Rq1), wants(Stage::Rq2), wants(Stage::Rq3), wants(Stage::Rq4))?;
    let written = exp.write(&suite, &dir)?;
    eprintln!("wrote {} files under {}", written.len(), dir.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Index { collection, format, out } => {
            let coll = load_collection(&collection, &format.options())?;
            let index = InvertedIndex::build(&coll, &cfg.analyzer)?;
            index.save(&out)?;
            eprintln!("indexed {} documents, {} terms", index.doc_count(), index.term_count());
        }
        Command::Search(args) => search(&args, &cfg)?,
        Command::Transduce { rules, queries, format, out } => {
            let text = fs::read_to_string(&rules).with_context(|| format!("reading {}", rules.display()))?;
            let ruleset = parse_ruleset(&text).with_context(|| format!("parsing {}", rules.display()))?;
            let qs = load_queries(&queries, &format.options())?;
            write_text(&out, &format_queries_tsv(&transduce_queryset(&qs, &ruleset)))?;
        }
        Command::Train(args) => train_cmd(&args, &cfg)?,
        Command::Evaluate { run, qrels, metrics, out } => {
            let specs = match metrics {
                Some(m) => parse_metric_list(&m)?,
                None => cfg.metrics.clone(),
            };
            let report = evaluate_run(&read_run(&run)?, &load_qrels(&qrels)?, &qrels.display().to_string(), &specs)?;
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::Compare { a, b, qrels, metric, out } => {
            let metric: MetricSpec = match metric {
                Some(m) => m.parse()?,
                None => cfg.report_metric,
            };
            let qrels_id = qrels.display().to_string();
            let qrels = load_qrels(&qrels)?;
            let ra = evaluate_run(&read_run(&a)?, &qrels, &qrels_id, &[metric])?;
            let rb = evaluate_run(&read_run(&b)?, &qrels, &qrels_id, &[metric])?;
            emit(out.as_deref(), &compare_runs(&ra, &rb, metric)?.to_csv())?;
        }
        Command::Experiment(args) => experiment(&args, cfg)?,
        Command::Config => print!("{}", cfg.to_config_text()),
    }
    Ok(())
}
