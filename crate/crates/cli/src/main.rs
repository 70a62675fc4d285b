//! `dntm`: train a discriminative neural topic model and evaluate it.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dntm_core::checkpoint::load_checkpoint_expecting;
use dntm_core::corpus::read_labels;
use dntm_core::*;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "dntm", version, about = "Discriminative neural topic model")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, log and manifest.
    Train(TrainArgs),
    /// Assign each document to its most probable topic.
    Cluster(ClusterArgs),
    /// Print the top words of each topic.
    Topics(TopicsArgs),
    /// Cluster tf-idf vectors with K-means and score against gold labels.
    Baseline(BaselineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Plain,
    Bow,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "plain")]
    format: Format,
    /// Word list for bag-of-words input, one word per line in term-id order.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: CorpusArgs,
    /// Integer class ids, one line per corpus line (recorded in the manifest).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    topics: usize,
    /// Trainer settings in key=value form.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run on a single thread.
    #[arg(long)]
    deterministic: bool,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reject the checkpoint unless it has this many topics.
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long, default_value_t = 2)]
    min_doc_len: usize,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    input: CorpusArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Where to write one cluster id per document.
    #[arg(long)]
    out: PathBuf,
    /// Gold class ids, one per corpus line. Without a value the corpus's
    /// inline labels are used.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    gold: Option<String>,
}

#[derive(Args)]
struct TopicsArgs {
    #[command(flatten)]
    input: CorpusArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Only report this topic.
    #[arg(long)]
    topic: Option<usize>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    input: CorpusArgs,
    /// Number of clusters (default: number of gold classes).
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    gold: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    min_doc_len: usize,
    /// Where to write one cluster id per document.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dntm: error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = match &cli.command {
        Command::Train(a) if a.deterministic => Some(1),
        _ => cli.threads,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a, threads),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Topics(a) => cmd_topics(a),
        Command::Baseline(a) => cmd_baseline(a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn read_words(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| l.trim().to_owned()).filter(|l| !l.is_empty()).collect())
}

/// Loads a corpus, over `fixed` if given. Plain tokens outside `fixed` are
/// dropped; bag-of-words input must have exactly its size.
fn load(args: &CorpusArgs, fixed: Option<&Vocabulary>) -> Result<Corpus> {
    let ctx = || format!("loading {}", args.corpus.display());
    let mut corpus = match args.format {
        Format::Plain => {
            let loaded = load_corpus_plain(open(&args.corpus)?, fixed).with_context(ctx)?;
            if loaded.dropped_tokens > 0 {
                eprintln!("dntm: dropped {} out-of-vocabulary tokens", loaded.dropped_tokens);
            }
            loaded.corpus
        }
        Format::Bow => {
            let mut corpus = load_corpus_bow(open(&args.corpus)?).with_context(ctx)?;
            if let Some(path) = &args.vocab {
                corpus.vocab = corpus
                    .vocab
                    .rename(read_words(path)?)
                    .with_context(|| format!("applying word list {}", path.display()))?;
            }
            corpus
        }
    };
    if let (Format::Bow, Some(vocab)) = (args.format, fixed) {
        if corpus.vocab.len() != vocab.len() {
            return Err(Error::DimensionMismatch {
                what: "vocabulary size",
                found: corpus.vocab.len(),
                expected: vocab.len(),
            })
            .with_context(ctx);
        }
        corpus.vocab = corpus.vocab.rename(vocab.words().iter().cloned())?;
    }
    Ok(corpus)
}

/// The label file named by `--gold`; a bare `--gold` means inline labels.
fn gold_file(gold: &Option<String>) -> Option<&Path> {
    gold.as_deref().filter(|g| !g.is_empty()).map(Path::new)
}

/// Attaches external labels and drops short documents.
fn prepare(mut corpus: Corpus, labels: Option<&Path>, min_doc_len: usize) -> Result<Corpus> {
    if let Some(path) = labels {
        let labels = read_labels(open(path)?).with_context(|| format!("reading {}", path.display()))?;
        corpus.attach_labels(&labels)?;
    }
    let (corpus, removed) = filter_short_documents(&corpus, min_doc_len)?;
    if removed > 0 {
        eprintln!("dntm: skipped {removed} documents shorter than {min_doc_len} words");
    }
    Ok(corpus)
}

fn gold_of(corpus: &Corpus) -> Result<Vec<usize>> {
    corpus
        .gold_labels()
        .context("gold labels requested but some documents have none")
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn cmd_train(args: TrainArgs, threads: Option<usize>) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::parse(open(path)?).with_context(|| format!("reading {}", path.display()))?,
        None => TrainConfig::default(),
    };
    config.topics = args.topics;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;

    if args.out.exists() {
        let non_empty = fs::read_dir(&args.out)
            .with_context(|| format!("reading {}", args.out.display()))?
            .next()
            .is_some();
        if non_empty && !args.force {
            bail!("{} is not empty (use --force to overwrite)", args.out.display());
        }
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let corpus = load(&args.input, None)?;
    let corpus = prepare(corpus, args.labels.as_deref(), config.min_doc_len)?;

    let checkpoint = args.out.join("model.ckpt");
    let log_path = config
        .log_path
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| args.out.join("train.log"));

    let mut inputs = vec![("corpus", args.input.corpus.clone())];
    inputs.extend(args.input.vocab.clone().map(|p| ("vocab", p)));
    inputs.extend(args.labels.clone().map(|p| ("labels", p)));
    inputs.extend(args.config.clone().map(|p| ("config", p)));
    let mut manifest = String::new();
    writeln!(manifest, "tool_version={}", env!("CARGO_PKG_VERSION"))?;
    writeln!(manifest, "seed={}", config.seed)?;
    writeln!(manifest, "deterministic={}", args.deterministic)?;
    writeln!(manifest, "threads={}", threads.map_or("auto".to_owned(), |n| n.to_string()))?;
    writeln!(
        manifest,
        "format={}",
        match args.input.format {
            Format::Plain => "plain",
            Format::Bow => "bow",
        }
    )?;
    writeln!(manifest, "documents={}", corpus.len())?;
    writeln!(manifest, "vocab_size={}", corpus.vocab.len())?;
    for (name, path) in &inputs {
        writeln!(manifest, "input.{name}={}", path.display())?;
        writeln!(manifest, "input.{name}.sha256={}", sha256_file(path)?)?;
    }
    writeln!(manifest, "artifact.checkpoint={}", checkpoint.display())?;
    writeln!(manifest, "artifact.log={}", log_path.display())?;
    for line in config.to_key_values().lines() {
        writeln!(manifest, "config.{line}")?;
    }
    fs::write(args.out.join("manifest.txt"), manifest).context("writing manifest")?;

    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let vocab = &corpus.vocab;
    let every = config.checkpoint_every;
    let out_dir = &args.out;
    let (params, _) = train::<f64, _>(&corpus, &config, |record, params| {
        writeln!(log, "{}", record.to_log_line())?;
        log.flush()?;
        if every > 0 && record.epoch % every == 0 {
            save_checkpoint(params, vocab, out_dir.join(format!("model-epoch{}.ckpt", record.epoch)))?;
        }
        Ok(())
    })
    .context("training failed")?;
    drop(log);
    save_checkpoint(&params, vocab, &checkpoint)
        .with_context(|| format!("writing {}", checkpoint.display()))?;
    eprintln!("dntm: wrote {}", checkpoint.display());
    Ok(())
}

fn load_model(model: &ModelArgs) -> Result<(Params, Vocabulary)> {
    let expected = ExpectedDims {
        topics: model.topics,
        ..Default::default()
    };
    load_checkpoint_expecting(&model.checkpoint, expected)
        .with_context(|| format!("loading {}", model.checkpoint.display()))
}

fn cmd_cluster(args: ClusterArgs) -> Result<()> {
    let (params, vocab) = load_model(&args.model)?;
    let corpus = load(&args.input, Some(&vocab))?;
    let corpus = prepare(corpus, gold_file(&args.gold), args.model.min_doc_len)?;
    let clusters = assign_clusters(&params, &corpus)?;
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    clusters.write_to(BufWriter::new(file))?;
    if args.gold.is_some() {
        let gold = gold_of(&corpus)?;
        println!("{}", metrics_line(purity(&clusters, &gold)?, nmi(&clusters, &gold)?));
    }
    Ok(())
}

fn cmd_topics(args: TopicsArgs) -> Result<()> {
    let (params, vocab) = load_model(&args.model)?;
    let corpus = load(&args.input, Some(&vocab))?;
    let corpus = prepare(corpus, None, args.model.min_doc_len)?;
    let posterior = word_topic_posterior(&params, &corpus)?;
    let topics: Vec<usize> = match args.topic {
        Some(t) if t >= params.topics() => bail!("topic {t} out of range (model has {})", params.topics()),
        Some(t) => vec![t],
        None => (0..params.topics()).collect(),
    };
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    analysis::write_top_words(&posterior, &vocab, topics, args.n, &mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    if args.gold.is_none() {
        bail!("baseline needs gold labels (--gold)");
    }
    let corpus = load(&args.input, None)?;
    let corpus = prepare(corpus, gold_file(&args.gold), args.min_doc_len)?;
    let gold = gold_of(&corpus)?;
    let k = match args.clusters {
        Some(k) => k,
        None => gold.iter().max().map_or(0, |m| m + 1),
    };
    let clusters = kmeans_baseline(&corpus, k, args.seed)?;
    if let Some(path) = &args.out {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        clusters.write_to(BufWriter::new(file))?;
    }
    println!("{}", metrics_line(purity(&clusters, &gold)?, nmi(&clusters, &gold)?));
    Ok(())
}
