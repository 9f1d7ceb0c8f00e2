use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use refinedial::config::RunConfig;
use refinedial::corpus::synthetic::{generate as synthesize, SyntheticSpec};
use refinedial::corpus::{Corpus, Vocabulary};
use refinedial::experiment::{self, Experiment, Generated, TrainedRun as Run};
use refinedial::metrics::{
    evaluate, write_details, write_report_csv, write_sweep_csv, EmbeddingTable, EvalSample, IdfTable, MetricOptions,
    MetricReport, Stopwords,
};
use refinedial::pipeline::{Ablation, Selection};
use refinedial::topic_refiner::TopicClassifier;
use refinedial::trainer::latest_checkpoint;
use refinedial::Error;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    Usage(String),
    /// Missing or malformed input data (exit 2).
    Data(String),
    /// Anything else (exit 3).
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => CliError::Usage(msg),
            Error::Data(_) | Error::Parse { .. } | Error::Format(_) | Error::Io(_) => CliError::Data(msg),
            Error::Shape { .. } | Error::Index { .. } | Error::Contract(_) => CliError::Internal(msg),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "refinedial", version, about = "Persona-profile dialogue generation with hierarchical refiners")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus with planted clusters and topics.
    Corpus(CorpusArgs),
    /// Print the default configuration, annotated with full-scale values.
    Config {
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the query topic classifier.
    TrainTopics(TrainTopicsArgs),
    /// Jointly train the token refiner and the generator.
    Train(TrainArgs),
    /// Sample responses from a trained run.
    Generate(GenerateArgs),
    /// Score responses, or run a trained model on the test split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 5)]
    pub clusters: usize,
    #[arg(long, default_value_t = 5)]
    pub topics: usize,
    #[arg(long, default_value_t = 40)]
    pub pairs_per_user: usize,
    #[arg(long, default_value_t = 2000)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.4)]
    pub home_topic_bias: f64,
}

#[derive(Args, Debug)]
pub struct TrainTopicsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory for logs, checkpoints and the final model.
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrained topic classifier; trained on the fly when absent.
    #[arg(long)]
    pub topics: Option<PathBuf>,
    /// Switch off one component.
    #[arg(long, value_parser = parse_ablation)]
    pub ablate: Option<Ablation>,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Override `training.max_steps`.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint directory; defaults to the run's final model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Lines of `user<TAB>query`; defaults to the test split.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Responses, one per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Empty profiles: the non-personalized response.
    #[arg(long)]
    pub no_profile: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Override the profile size.
    #[arg(long)]
    pub k_p: Option<usize>,
    /// Test triplets to answer when no query file is given (0 = all).
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also write `<out>.profiles`: per query, lines of `rank, token, score, source`.
    #[arg(long)]
    pub dump_profiles: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// User, topic and token refiners.
    Refiners,
    /// BM25 retrieval of 15 history responses instead of the refiners.
    Bm25Baseline,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "k_p")]
    KP,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Output directory for the report files.
    #[arg(long)]
    pub out: PathBuf,
    /// Responses, one per line.
    #[arg(long, requires_all = ["references", "histories"])]
    pub responses: Option<PathBuf>,
    /// References, one per line.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// One JSON array of history sentences per line.
    #[arg(long)]
    pub histories: Option<PathBuf>,
    /// Trained run: supplies vocabulary, embeddings, IDF and stopwords, or is
    /// evaluated on the test split when no response file is given.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalMode::Refiners)]
    pub mode: EvalMode,
    #[arg(long, value_parser = parse_ablation)]
    pub ablate: Option<Ablation>,
    /// Sweep a parameter over the configured values, writing a CSV.
    #[arg(long, value_enum)]
    pub sweep: Option<SweepParam>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Corpus(a) => cmd_corpus(a),
        Command::Config { out } => cmd_config(out),
        Command::TrainTopics(a) => cmd_train_topics(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn write_toml<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = toml::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn cmd_corpus(a: CorpusArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        users: a.users,
        clusters: a.clusters,
        topics: a.topics,
        pairs_per_user: a.pairs_per_user,
        vocab_size: a.vocab_size,
        seed: a.seed,
        home_topic_bias: a.home_topic_bias,
        ..SyntheticSpec::default()
    };
    let synth = synthesize(&spec)?;
    synth.write(&a.out)?;
    write_toml(&spec, &a.out.join("config.toml"))?;
    let corpus = Corpus::ingest(&a.out.join("corpus.jsonl"))?;
    let s = corpus.stats();
    println!("{:<24} {:>10}", "statistic", "value");
    println!("{:<24} {:>10}", "# Users", s.users);
    println!("{:<24} {:>10}", "# Pairs", s.pairs);
    println!("{:<24} {:>10.2}", "Avg. history length", s.avg_history_length);
    println!("{:<24} {:>10.2}", "Avg. response tokens", s.avg_response_tokens);
    println!("{:<24} {:>10}", "Vocabulary", s.vocab_size);
    Ok(())
}

fn cmd_config(out: Option<PathBuf>) -> CliResult<()> {
    let text = RunConfig::annotated_default()?;
    match out {
        Some(path) => std::fs::write(&path, text).map_err(|e| io_err(&path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Loads a config, pinning the corpus path to an absolute one so snapshots
/// stay valid wherever they are read from.
fn load_config(path: &Path) -> CliResult<RunConfig> {
    if !path.exists() {
        return Err(CliError::Data(format!("config not found: {}", path.display())));
    }
    let mut cfg = RunConfig::load(path)?;
    if !cfg.corpus.path.exists() {
        return Err(CliError::Data(format!("corpus not found: {}", cfg.corpus.path.display())));
    }
    cfg.corpus.path = cfg
        .corpus
        .path
        .canonicalize()
        .map_err(|e| io_err(&cfg.corpus.path, e))?;
    Ok(cfg)
}

fn topics_summary(ex: &Experiment, report: &experiment::TopicReport, dir: &Path) -> CliResult<()> {
    report.classifier.save(&dir.join("topics.bin"))?;
    let mut curve = String::from("epoch,loss\n");
    for (i, l) in report.curve.epoch_loss.iter().enumerate() {
        curve.push_str(&format!("{},{l:.6}\n", i + 1));
    }
    let path = dir.join("topic_curve.csv");
    std::fs::write(&path, curve).map_err(|e| io_err(&path, e))?;
    println!(
        "topic classifier: {} topics, {} training queries, labels {}, held-out accuracy {:.4}",
        ex.cfg.topics.topics,
        ex.split.train.len(),
        if report.labelled { "planted" } else { "k-means" },
        report.held_out_accuracy
    );
    Ok(())
}

fn cmd_train_topics(a: TrainTopicsArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    create_dir(&a.out)?;
    cfg.snapshot(&a.out)?;
    let ex = Experiment::load(cfg)?;
    let report = ex.train_topics()?;
    topics_summary(&ex, &report, &a.out)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(n) = a.max_steps {
        cfg.training.max_steps = n;
    }
    if let Some(ab) = a.ablate {
        cfg.training.ablation = ab;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    cfg.snapshot(&a.out)?;
    let ex = Experiment::load(cfg)?;
    ex.corpus.vocab.save(&a.out.join("vocab.txt"))?;
    write_json(&ex.manifest, &a.out.join("split.json"))?;
    let classifier = match &a.topics {
        Some(path) => TopicClassifier::load(path)?,
        None => {
            let report = ex.train_topics()?;
            topics_summary(&ex, &report, &a.out)?;
            report.classifier
        }
    };
    if a.topics.is_some() {
        classifier.save(&a.out.join("topics.bin"))?;
    }
    let mut trainer = ex.trainer(classifier, ex.cfg.training.ablation)?;
    if a.resume {
        match latest_checkpoint(&a.out)? {
            Some(ck) => {
                trainer.load_checkpoint(&ck)?;
                println!("resumed from {} at step {}", ck.display(), trainer.state.step);
            }
            None => println!("no checkpoint to resume from; starting fresh"),
        }
    }
    let snapshot = serde_json::to_value(&ex.cfg).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut trainer = trainer.with_output(&a.out, snapshot)?;
    let state = trainer.train()?.clone();
    trainer.model.save(&a.out.join("model.bin"))?;
    let summary = serde_json::json!({
        "steps": state.step,
        "converged": state.converged,
        "ablation": ex.cfg.training.ablation.name(),
        "final_generator_loss_100": state.final_generator_mean(100),
        "final_refiner_loss_100": state.final_refiner_mean(100),
        "best_valid": state.best_valid,
        "checkpoints": state.checkpoints,
    });
    write_json(&summary, &a.out.join("summary.json"))?;
    println!(
        "trained {} steps ({}), final L^g {:.4}, checkpoints {}",
        state.step,
        if state.converged { "converged" } else { "max steps" },
        state.final_generator_mean(100).unwrap_or(f64::NAN),
        state.checkpoints.len()
    );
    Ok(())
}

fn load_run(dir: &Path, checkpoint: Option<&Path>) -> CliResult<Run> {
    Ok(Run::open(dir, checkpoint)?)
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> CliResult<()> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let mut run = load_run(&a.run, a.checkpoint.as_deref())?;
    if let Some(k) = a.k_p {
        if k == 0 {
            return Err(CliError::Usage("--k-p must be positive".into()));
        }
        run.ex.cfg.pipeline.k_p = k;
    }
    let ablation = if a.no_profile { Ablation::NoProfile } else { Ablation::None };
    let Run { ex, classifier, model } = &run;
    let ctx = ex.context(classifier.clone(), model)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let generated: Vec<Generated> = match &a.queries {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
            let mut out = Vec::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| io_err(path, e))?;
                let (user, text) = match line.split_once('\t') {
                    Some((u, q)) => (Some(u.trim()), q),
                    None => (None, line.as_str()),
                };
                if text.trim().is_empty() {
                    log::warn!("{}:{}: empty query skipped", path.display(), i + 1);
                    eprintln!("warning: {}:{}: empty query skipped", path.display(), i + 1);
                    continue;
                }
                let uid = user.and_then(|u| ex.corpus.user_index(u));
                if let (Some(u), None) = (user, uid) {
                    log::warn!("unknown user `{u}`; answering without profiles");
                }
                let query = ex.corpus.vocab.encode(text);
                let profiles = experiment::profiles_for_query(&ctx, model, uid, &query, ablation)?;
                let mut g = experiment::respond(model, &profiles, &query, ablation, a.seed, i as u64)?;
                g.user = uid.unwrap_or(usize::MAX);
                out.push(g);
            }
            out
        }
        None => {
            let triplets = ex.test_triplets(a.limit.unwrap_or(ex.cfg.eval.limit));
            let out = experiment::generate(&ctx, model, &triplets, ablation, a.seed)?;
            write_lines(
                &with_suffix(&a.out, ".references"),
                out.iter().map(|g| ex.corpus.vocab.decode(&g.reference)),
            )?;
            write_lines(
                &with_suffix(&a.out, ".histories"),
                ex.samples(&out).iter().map(|s| {
                    let h: Vec<String> = s.history.iter().map(|r| ex.corpus.vocab.decode(r)).collect();
                    serde_json::to_string(&h).expect("strings serialize")
                }),
            )?;
            out
        }
    };
    write_lines(&a.out, generated.iter().map(|g| ex.corpus.vocab.decode(&g.response)))?;
    write_lines(
        &with_suffix(&a.out, ".details"),
        generated.iter().map(|g| {
            let user = ex.corpus.users.get(g.user).map(|h| h.user_id.clone());
            serde_json::json!({
                "user": user,
                "query": ex.corpus.vocab.decode(&g.query),
                "response": ex.corpus.vocab.decode(&g.response),
                "sim_profile": ex.corpus.vocab.decode(&g.sim_profile),
                "per_profile": ex.corpus.vocab.decode(&g.per_profile),
                "input_len": g.input_len,
                "nucleus_sizes": g.nucleus_sizes,
            })
            .to_string()
        }),
    )?;
    if a.dump_profiles {
        write_lines(
            &with_suffix(&a.out, ".profiles"),
            generated.iter().enumerate().flat_map(|(i, g)| {
                std::iter::once(format!("# query {}: {}", i + 1, ex.corpus.vocab.decode(&g.query)))
                    .chain(g.profile_dump(&ex.corpus.vocab))
            }),
        )?;
    }
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    ex.cfg.snapshot(dir)?;
    println!("wrote {} responses to {}", generated.len(), a.out.display());
    Ok(())
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn report_files(dir: &Path, report: &MetricReport, rows: &[refinedial::metrics::SampleScores]) -> CliResult<()> {
    write_report_csv(report, &dir.join("report.csv"))?;
    write_details(rows, &dir.join("details.jsonl"))?;
    let path = dir.join("report.txt");
    std::fs::write(&path, report.render()).map_err(|e| io_err(&path, e))?;
    print!("{}", report.render());
    Ok(())
}

#[derive(Serialize)]
struct FileEvalSnapshot<'a> {
    responses: &'a Path,
    references: &'a Path,
    histories: &'a Path,
    run: Option<&'a Path>,
    samples: usize,
    embeddings: &'a str,
    idf: &'a str,
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    create_dir(&a.out)?;
    match (&a.responses, &a.run) {
        (Some(_), _) => eval_files(&a),
        (None, Some(dir)) => eval_run(&a, dir),
        (None, None) => Err(CliError::Usage("eval needs --responses/--references/--histories or --run".into())),
    }
}

/// Scores aligned response, reference and history files.
fn eval_files(a: &EvalArgs) -> CliResult<()> {
    let (rp, fp, hp) = (
        a.responses.as_deref().expect("checked"),
        a.references.as_deref().expect("required by clap"),
        a.histories.as_deref().expect("required by clap"),
    );
    let responses = read_lines(rp)?;
    let references = read_lines(fp)?;
    let histories = read_lines(hp)?;
    if responses.len() != references.len() || responses.len() != histories.len() {
        return Err(CliError::Data(format!(
            "misaligned inputs: {} responses, {} references, {} histories",
            responses.len(),
            references.len(),
            histories.len()
        )));
    }
    let mut history_sentences = Vec::with_capacity(histories.len());
    for (i, line) in histories.iter().enumerate() {
        let h: Vec<String> = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", hp.display(), i + 1)))?;
        history_sentences.push(h);
    }
    let run = a.run.as_deref().map(|d| load_run(d, a.checkpoint.as_deref())).transpose()?;
    let mut vocab = match &run {
        Some(r) => r.ex.corpus.vocab.clone(),
        None => Vocabulary::new(),
    };
    let fixed = run.is_some();
    let mut encode = |text: &str| if fixed { vocab.encode(text) } else { vocab.encode_growing(text) };
    let mut samples = Vec::with_capacity(responses.len());
    for i in 0..responses.len() {
        let reference = encode(&references[i]);
        if reference.is_empty() {
            return Err(CliError::Data(format!("{}:{}: empty reference", fp.display(), i + 1)));
        }
        samples.push(EvalSample {
            candidate: encode(&responses[i]),
            reference,
            history: history_sentences[i].iter().map(|s| encode(s)).collect(),
        });
    }
    let (table, idf, stop, opts, emb_name, idf_name) = match &run {
        Some(r) => (
            EmbeddingTable::from_matrix(r.model.store.get(r.model.generator.tok))?,
            r.ex.idf(),
            r.ex.stopwords(),
            MetricOptions {
                coverage_target: r.ex.cfg.eval.coverage_target,
            },
            "generator token embeddings",
            "training responses",
        ),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let rows = (0..vocab.len()).map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let docs: Vec<&[usize]> = samples.iter().flat_map(|s| s.history.iter().map(Vec::as_slice)).collect();
            (
                EmbeddingTable::new(rows)?,
                IdfTable::build(docs),
                Stopwords::new([]),
                MetricOptions::default(),
                "seeded random projections",
                "history sentences",
            )
        }
    };
    let (report, rows) = evaluate(&samples, &table, &idf, &stop, &opts)?;
    let snapshot = FileEvalSnapshot {
        responses: rp,
        references: fp,
        histories: hp,
        run: a.run.as_deref(),
        samples: samples.len(),
        embeddings: emb_name,
        idf: idf_name,
    };
    write_toml(&snapshot, &a.out.join("config.toml"))?;
    report_files(&a.out, &report, &rows)
}

/// Generates for the test split of a trained run and scores the result.
fn eval_run(a: &EvalArgs, dir: &Path) -> CliResult<()> {
    let mut run = load_run(dir, a.checkpoint.as_deref())?;
    if a.mode == EvalMode::Bm25Baseline {
        run.ex.cfg.pipeline.selection = Selection::Bm25;
    }
    run.ex.cfg.snapshot(&a.out)?;
    let Run { ex, classifier, model } = &run;
    let mut ctx = ex.context(classifier.clone(), model)?;
    let triplets = ex.test_triplets(ex.cfg.eval.limit);
    match a.sweep {
        Some(SweepParam::KP) => {
            let sweep: BTreeMap<usize, Vec<MetricReport>> = ex.sweep_k_p(&mut ctx, model, &triplets)?;
            write_sweep_csv("k_p", &sweep, &a.out.join("sweep_k_p.csv"))?;
            println!("{:>6} {:>10}", "k_p", "P-F1");
            for (k, reports) in &sweep {
                println!("{k:>6} {:>10.3}", experiment::mean_persona_f1(reports) * 100.0);
            }
            Ok(())
        }
        None => {
            let ablation = a.ablate.unwrap_or(Ablation::None);
            let generated = experiment::generate(&ctx, model, &triplets, ablation, a.seed)?;
            experiment::write_generations(&ex.corpus, &generated, &a.out.join("generations.jsonl"))?;
            let (report, rows) = ex.score(model, &generated)?;
            report_files(&a.out, &report, &rows)
        }
    }
}
