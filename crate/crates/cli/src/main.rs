mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use reviewbench::corpus::{
    self, build_dataset_with_report, synth_corpus, CorpusStats, Dataset, DropReport, SynthSpec, Task, TopicMap,
};
use reviewbench::eval::{
    self, disagreement_report, run_experiment_parallel, sweep, ExperimentResult, FoldPlan, ModelSpec, SweepParam,
};

use config::{ReportFormat, RunConfig};

/// Default output root when neither `--out` nor the config sets one.
const OUT_ENV: &str = "REVIEWBENCH_OUT";

#[derive(Parser)]
#[command(name = "reviewbench", version, about = "Course-review sentiment and topic classification benchmark")]
struct Cli {
    /// Output root holding dataset/, results/ and reports/. Falls back to
    /// $REVIEWBENCH_OUT, then ./reviewbench-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and label raw reviews into a dataset plus a statistics file.
    Ingest(IngestArgs),
    /// Corpus statistics and top n-grams per class.
    Stats(StatsArgs),
    /// Cross-validate one model described by a run config.
    Eval(EvalArgs),
    /// Re-run one model over increasing maxlen or epoch values.
    Sweep(SweepArgs),
    /// List records on which two results disagree.
    Compare(CompareArgs),
    /// Summary table over several result files.
    Report(ReportArgs),
    /// Write a synthetic labeled corpus.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Csv,
    Jsonl,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Guessed from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<InputFormat>,
    #[arg(long)]
    task: Task,
    /// Title-to-topic rules; required for the topic task.
    #[arg(long)]
    topic_map: Option<PathBuf>,
    /// Output file stem; defaults to the input file stem.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// n-gram order (1 to 3).
    #[arg(long, default_value_t = 1)]
    ngram: usize,
    /// n-grams listed per class.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct RunFlags {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Number of folds (overrides cv.k).
    #[arg(long)]
    k: Option<usize>,
    /// Fold seed (overrides cv.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact file stem (overrides name).
    #[arg(long)]
    name: Option<String>,
    /// Fit naive Bayes on TF-IDF weights instead of counts.
    #[arg(long)]
    nb_on_tfidf: bool,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    parallel_folds: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    param: SweepParam,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Dataset both results were computed on.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 200)]
    excerpt_chars: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Result JSON files, one table row each.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    #[arg(long, default_value = "summary")]
    name: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    task: Task,
    #[arg(long, default_value_t = 1000)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share of positive reviews (sentiment).
    #[arg(long, default_value_t = 0.915)]
    positive_prior: f64,
    /// Comma-separated topic priors in class order (topic).
    #[arg(long, value_delimiter = ',')]
    topic_priors: Option<Vec<f64>>,
    /// Place signal tokens only at or after this position.
    #[arg(long)]
    signal_after: Option<usize>,
    #[arg(long)]
    signal_per_doc: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value = "synthetic")]
    name: String,
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(flag: Option<&Path>, config: Option<&Path>) -> Layout {
        let root = flag
            .map(Path::to_path_buf)
            .or_else(|| config.map(Path::to_path_buf))
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("reviewbench-out"));
        Layout { root }
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.root.join(sub);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    Dataset::read_jsonl(BufReader::new(file)).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_result(path: &Path) -> Result<ExperimentResult> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentResult::from_json(&text).with_context(|| format!("parsing result {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

fn ingest(args: &IngestArgs, layout: &Layout) -> Result<()> {
    let topic_map = match (&args.topic_map, args.task) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading topic map {}", p.display()))?;
            Some(TopicMap::from_json(&text).with_context(|| format!("parsing topic map {}", p.display()))?)
        }
        (None, Task::Topic) => bail!("the topic task needs --topic-map"),
        (None, Task::Sentiment) => None,
    };
    let format = args.format.unwrap_or_else(|| match args.input.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => InputFormat::Jsonl,
        _ => InputFormat::Csv,
    });
    let file = File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let reviews = match format {
        InputFormat::Csv => corpus::read_reviews_csv(file),
        InputFormat::Jsonl => corpus::read_reviews_jsonl(BufReader::new(file)),
    }
    .with_context(|| format!("reading reviews from {}", args.input.display()))?;
    let (dataset, dropped) = build_dataset_with_report(reviews, args.task, topic_map.as_ref())?;
    let n_dropped = dropped.total();
    let name = args.name.clone().unwrap_or_else(|| stem(&args.input));
    let dir = layout.dir("dataset")?;
    let data_path = dir.join(format!("{name}.jsonl"));
    dataset.write_jsonl(create(&data_path)?)?;
    let stats_path = dir.join(format!("{name}.stats.csv"));
    CorpusStats::compute(&dataset, dropped).write_csv(create(&stats_path)?)?;
    println!(
        "{} reviews kept, {} dropped -> {}",
        dataset.len(),
        n_dropped,
        data_path.display()
    );
    Ok(())
}

fn stats(args: &StatsArgs, layout: &Layout) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let name = stem(&args.dataset);
    let dir = layout.dir("reports")?;
    let stats = CorpusStats::compute(&dataset, DropReport::default());
    let stats_path = dir.join(format!("{name}.stats.csv"));
    stats.write_csv(create(&stats_path)?)?;
    let ngrams = corpus::top_ngrams(&dataset, args.ngram, args.top)?;
    let ngram_path = dir.join(format!("{name}.ngrams{}.csv", args.ngram));
    let mut out = create(&ngram_path)?;
    writeln!(out, "label,rank,ngram,score")?;
    for stats in ngrams.values() {
        for (rank, s) in stats.iter().enumerate() {
            writeln!(out, "{},{},{},{}", s.label, rank + 1, s.ngram.join(" "), s.score)?;
        }
    }
    out.flush()?;
    println!("{} reviews", stats.n_reviews);
    for (label, count) in &stats.class_counts {
        println!("  {label}: {count}");
    }
    println!(
        "tokens per review: min {} mean {:.1} std {:.1} max {}",
        stats.tokens_min, stats.tokens_mean, stats.tokens_std, stats.tokens_max
    );
    Ok(())
}

/// Config plus flag overrides, validated, with the dataset and fold plan.
struct PreparedRun {
    config: RunConfig,
    dataset: Dataset,
    plan: FoldPlan,
    threads: usize,
}

fn prepare(flags: &RunFlags) -> Result<PreparedRun> {
    let mut config = RunConfig::load(&flags.config)?;
    if let Some(k) = flags.k {
        config.cv.k = Some(k);
    }
    if let Some(seed) = flags.seed {
        config.cv.seed = seed;
    }
    if let Some(name) = &flags.name {
        config.name = Some(name.clone());
    }
    if flags.nb_on_tfidf {
        match &mut config.model {
            ModelSpec::NaiveBayes { on_tfidf, .. } => *on_tfidf = true,
            other => bail!("--nb-on-tfidf applies to naive_bayes, not {}", other.id()),
        }
    }
    if flags.parallel_folds == 0 {
        bail!("--parallel-folds must be at least 1");
    }
    config.validate()?;
    let dataset = load_dataset(&config.dataset)?;
    if let Some(task) = config.task {
        if task != dataset.task {
            bail!("field `task`: config says {task} but the dataset is {}", dataset.task);
        }
    }
    let k = config.cv.k.unwrap_or_else(|| dataset.task.default_folds());
    let plan = FoldPlan::for_dataset(&dataset, k, config.cv.seed)?;
    Ok(PreparedRun {
        config,
        dataset,
        plan,
        threads: flags.parallel_folds,
    })
}

fn write_tables(results: &[ExperimentResult], formats: &[ReportFormat], dir: &Path, name: &str) -> Result<()> {
    for format in formats {
        match format {
            ReportFormat::Csv => eval::write_summary_csv(results, create(&dir.join(format!("{name}.csv")))?)?,
            ReportFormat::Markdown => {
                let mut md = eval::summary_markdown(results);
                for r in results {
                    md.push_str(&format!("\nConfusion ({}):\n\n", r.model_id));
                    md.push_str(&eval::confusion_markdown(r));
                }
                write_file(&dir.join(format!("{name}.md")), md)?;
            }
        }
    }
    Ok(())
}

fn eval_cmd(args: &EvalArgs, cli_out: Option<&Path>) -> Result<()> {
    let run = prepare(&args.run)?;
    let layout = Layout::new(cli_out, run.config.output_dir.as_deref());
    let result = run_experiment_parallel(&run.dataset, &run.config.model, &run.plan, run.threads)?;
    let name = run.config.name();
    let results_dir = layout.dir("results")?;
    write_file(&results_dir.join(format!("{name}.json")), result.to_json()?)?;
    write_tables(std::slice::from_ref(&result), &run.config.formats, &layout.dir("reports")?, &name)?;
    print!("{}", eval::summary_markdown(std::slice::from_ref(&result)));
    Ok(())
}

fn sweep_cmd(args: &SweepArgs, cli_out: Option<&Path>) -> Result<()> {
    let run = prepare(&args.run)?;
    let layout = Layout::new(cli_out, run.config.output_dir.as_deref());
    let result = sweep(&run.dataset, &run.config.model, &run.plan, args.param, &args.values, run.threads)?;
    let name = format!("{}.{}", run.config.name(), args.param);
    write_file(
        &layout.dir("results")?.join(format!("{name}.json")),
        serde_json::to_string_pretty(&result)?,
    )?;
    let csv_path = layout.dir("reports")?.join(format!("{name}.csv"));
    result.write_csv(create(&csv_path)?)?;
    for (v, r) in result.values.iter().zip(&result.results) {
        println!(
            "{} {v}: accuracy {:.3} ± {:.3}, f1_macro {:.3} ± {:.3}",
            args.param, r.accuracy_mean, r.accuracy_std, r.f1_macro_mean, r.f1_macro_std
        );
    }
    Ok(())
}

fn compare(args: &CompareArgs, layout: &Layout) -> Result<()> {
    let (a, b) = (load_result(&args.a)?, load_result(&args.b)?);
    let dataset = load_dataset(&args.dataset)?;
    let report = disagreement_report(&a, &b, &dataset, args.excerpt_chars)?;
    let (na, nb) = (stem(&args.a), stem(&args.b));
    let path = layout.dir("reports")?.join(format!("{na}_vs_{nb}.txt"));
    eval::write_disagreements(&report, &a.model_id, &b.model_id, create(&path)?)?;
    println!("{} disagreements -> {}", report.len(), path.display());
    Ok(())
}

fn report(args: &ReportArgs, layout: &Layout) -> Result<()> {
    let results = args.results.iter().map(|p| load_result(p)).collect::<Result<Vec<_>>>()?;
    let formats = [ReportFormat::Csv, ReportFormat::Markdown];
    write_tables(&results, &formats, &layout.dir("reports")?, &args.name)?;
    print!("{}", eval::summary_markdown(&results));
    Ok(())
}

fn synth(args: &SynthArgs, layout: &Layout) -> Result<()> {
    let mut spec = match (args.task, &args.topic_priors) {
        (Task::Sentiment, _) => SynthSpec::sentiment(args.positive_prior),
        (Task::Topic, priors) => {
            let p: [f64; 4] = match priors {
                Some(v) => v
                    .as_slice()
                    .try_into()
                    .map_err(|_| anyhow::anyhow!("--topic-priors needs 4 values, got {}", v.len()))?,
                None => [0.25; 4],
            };
            match args.signal_after {
                Some(after) => SynthSpec::late_signal_topic(p, after),
                None => SynthSpec::topic(p),
            }
        }
    };
    if let (Task::Sentiment, Some(after)) = (args.task, args.signal_after) {
        spec.signal_after = Some(after);
        spec.doc_len = (after + 10, after + 40);
    }
    if let Some(n) = args.signal_per_doc {
        spec.signal_per_doc = n;
    }
    spec.label_noise = args.label_noise;
    let dataset = synth_corpus(args.seed, args.size, &spec)?;
    let path = layout.dir("dataset")?.join(format!("{}.jsonl", args.name));
    dataset.write_jsonl(create(&path)?)?;
    println!("{} reviews -> {}", dataset.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    let layout = Layout::new(out, None);
    match &cli.command {
        Command::Ingest(a) => ingest(a, &layout),
        Command::Stats(a) => stats(a, &layout),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Sweep(a) => sweep_cmd(a, out),
        Command::Compare(a) => compare(a, &layout),
        Command::Report(a) => report(a, &layout),
        Command::Synth(a) => synth(a, &layout),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
