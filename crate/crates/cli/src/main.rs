use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use spice_core::dataset::{read_scenes, CurationConfig, PosLexicon, SamplingConfig};
use spice_core::harness::{
    build_dataset, check_predictions, evaluate, evaluate_sequence_files, load_samples, read_jsonl_file, Aggregate,
    BuildConfig, EvalConfig, EvalStyle, Prediction, ProviderSpec,
};
use spice_core::io::write_jsonl;
use spice_core::metrics::{MetricSelection, ModeSelection, ScoreConfig, DEFAULT_PAIRING_CAP};
use spice_core::scene_graph::{random_id_assignment, render_context, SceneGraph};

const EXIT_FATAL: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "spice", version, about = "Scene-graph update datasets and metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Curate raw scenes and sample (prior, reference) update pairs.
    BuildDataset(BuildArgs),
    /// Score single-step predictions against a dataset.
    Evaluate(EvalArgs),
    /// Score step predictions along annotated sequences.
    EvaluateSequence(SequenceArgs),
    /// Check that every parse in a prediction file is well formed.
    ParseCheck(ParseCheckArgs),
    /// Print the text context of each scene graph in a JSONL file.
    RenderContext(RenderArgs),
    /// Print closed-form checks of the training objectives as JSON.
    ObjectivesGolden,
}

#[derive(Args)]
struct BuildArgs {
    /// Scenes, one JSON object per line (Visual Genome or raw-scene layout).
    #[arg(long)]
    input: PathBuf,
    /// Part-of-speech lexicon, lines of {"token", "tag"}.
    #[arg(long)]
    pos: Option<PathBuf>,
    /// Sample pairs JSONL; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Statistics JSON; stderr when omitted.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    pairs_per_scene: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Similarity for duplicate and attribute merging: exact, jaccard, table:PATH, remote:URL[#MODEL].
    #[arg(long, default_value = "jaccard")]
    provider: String,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    #[arg(long, default_value_t = 0.7)]
    name_sim_threshold: f64,
    #[arg(long, default_value_t = 0.7)]
    attr_merge_threshold: f64,
    #[arg(long, default_value_t = 4)]
    min_nodes: usize,
    #[arg(long, default_value_t = 4)]
    min_edges: usize,
    #[arg(long, default_value_t = 1)]
    dup_size_penalty: usize,
    #[arg(long, default_value_t = 2)]
    min_term_count: usize,
    #[arg(long, default_value_t = 3)]
    max_words: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Ged,
    Red,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hard,
    Soft,
    Both,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, value_enum, default_value_t = MetricArg::Both)]
    metrics: MetricArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    /// RED similarity: exact, jaccard, table:PATH, remote:URL[#MODEL].
    /// Remote embeddings are cached under $SPICE_EMBEDDING_CACHE when set.
    #[arg(long, default_value = "jaccard")]
    provider: String,
    /// Largest side solved exactly; bigger updates use greedy pairing.
    #[arg(long, default_value_t = DEFAULT_PAIRING_CAP)]
    cap: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Per-sample reports JSONL.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Aggregate JSON; stdout when omitted.
    #[arg(long)]
    summary: Option<PathBuf>,
}

impl ScoreArgs {
    fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            metrics: match self.metrics {
                MetricArg::Ged => MetricSelection::Ged,
                MetricArg::Red => MetricSelection::Red,
                MetricArg::Both => MetricSelection::Both,
            },
            modes: match self.mode {
                ModeArg::Hard => ModeSelection::Hard,
                ModeArg::Soft => ModeSelection::Soft,
                ModeArg::Both => ModeSelection::Both,
            },
            cap: self.cap,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Lines of {"sample_id", "parse"}.
    #[arg(long)]
    predictions: PathBuf,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    GroundTruth,
    Carried,
}

#[derive(Args)]
struct SequenceArgs {
    /// Lines of {"scene_id", "initial", "steps": [{"step", "reference"}]}.
    #[arg(long)]
    sequences: PathBuf,
    /// Lines of {"scene_id", "step", "parse"}.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, value_enum, default_value_t = StyleArg::GroundTruth)]
    style: StyleArg,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Args)]
struct ParseCheckArgs {
    /// Prediction JSONL, or a bare program with --text.
    file: PathBuf,
    /// Also execute each parse against its sample's prior.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    text: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene graphs JSONL; stdin when omitted.
    input: Option<PathBuf>,
    /// Shuffle node ids with this seed before rendering.
    #[arg(long)]
    seed: Option<u64>,
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    Partial,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_FATAL)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(EXIT_PARTIAL),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}

fn run(command: Command) -> Result<Status> {
    match command {
        Command::BuildDataset(a) => build(a),
        Command::Evaluate(a) => eval(a),
        Command::EvaluateSequence(a) => eval_sequence(a),
        Command::ParseCheck(a) => parse_check(a),
        Command::RenderContext(a) => render(a),
        Command::ObjectivesGolden => {
            let cases = spice_core::objectives::golden_cases()?;
            println!("{}", serde_json::to_string_pretty(&cases)?);
            Ok(Status::Ok)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write_json_to(path: Option<&Path>, value: &impl serde::Serialize, fallback_stdout: bool) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{text}")?;
            w.flush()?;
        }
        None if fallback_stdout => println!("{text}"),
        None => eprintln!("{text}"),
    }
    Ok(())
}

fn build(a: BuildArgs) -> Result<Status> {
    let scenes = read_scenes(open(&a.input)?).with_context(|| format!("reading {}", a.input.display()))?;
    let pos = match &a.pos {
        Some(p) => Some(PosLexicon::read_jsonl(open(p)?).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let cfg = BuildConfig {
        curation: CurationConfig {
            iou_threshold: a.iou_threshold,
            name_sim_threshold: a.name_sim_threshold,
            attr_merge_threshold: a.attr_merge_threshold,
            min_nodes: a.min_nodes,
            min_edges: a.min_edges,
            dup_size_penalty: a.dup_size_penalty,
            min_term_count: a.min_term_count,
            max_words_per_element: a.max_words,
        },
        sampling: SamplingConfig::default(),
        pairs_per_scene: a.pairs_per_scene,
        seed: a.seed,
        parallelism: a.jobs,
    };
    let provider: ProviderSpec = a.provider.parse()?;
    let out = build_dataset(&scenes, pos.as_ref(), &provider, &cfg)?;
    match &a.output {
        Some(p) => write_jsonl(create(p)?, &out.samples)?,
        None => write_jsonl(io::stdout().lock(), &out.samples)?,
    }
    write_json_to(a.stats.as_deref(), &out.stats, false)?;
    Ok(Status::Ok)
}

fn finish(aggregate: &Aggregate) -> Status {
    if aggregate.errored() > 0 {
        log::warn!("{} sample(s) scored as empty updates", aggregate.errored());
        Status::Partial
    } else {
        Status::Ok
    }
}

fn eval(a: EvalArgs) -> Result<Status> {
    let cfg = EvalConfig {
        dataset: a.dataset,
        predictions: a.predictions,
        score: a.score.score_config(),
        provider: a.score.provider.parse()?,
        parallelism: a.score.jobs,
        style: EvalStyle::SingleStep,
    };
    let out = evaluate(&cfg)?;
    if let Some(p) = &a.score.output {
        write_jsonl(create(p)?, &out.reports)?;
    }
    write_json_to(a.score.summary.as_deref(), &out.aggregate, true)?;
    Ok(finish(&out.aggregate))
}

fn eval_sequence(a: SequenceArgs) -> Result<Status> {
    let style = match a.style {
        StyleArg::GroundTruth => EvalStyle::SequentialGroundTruth,
        StyleArg::Carried => EvalStyle::SequentialCarried,
    };
    let cfg = EvalConfig {
        dataset: a.sequences,
        predictions: a.predictions,
        score: a.score.score_config(),
        provider: a.score.provider.parse()?,
        parallelism: a.score.jobs,
        style,
    };
    let out = evaluate_sequence_files(&cfg)?;
    if let Some(p) = &a.score.output {
        write_jsonl(create(p)?, &out.steps)?;
    }
    let summary = serde_json::json!({
        "style": out.style,
        "extension": out.extension,
        "aggregate": out.aggregate,
        "scenes": out.scenes,
    });
    write_json_to(a.score.summary.as_deref(), &summary, true)?;
    Ok(finish(&out.aggregate))
}

fn parse_check(a: ParseCheckArgs) -> Result<Status> {
    if a.text {
        let mut text = String::new();
        open(&a.file)?.read_to_string(&mut text)?;
        return match spice_core::parse_program(&text) {
            Ok(p) => {
                println!("ok: {} operation(s)", p.len());
                Ok(Status::Ok)
            }
            Err(e) => {
                println!("{}: {e}", a.file.display());
                Ok(Status::Partial)
            }
        };
    }
    let predictions: Vec<(usize, Prediction)> = read_jsonl_file(&a.file)?;
    let samples = match &a.dataset {
        Some(d) => Some(load_samples(d)?),
        None => None,
    };
    let issues = check_predictions(&predictions, samples.as_deref());
    let mut out = io::stdout().lock();
    for i in &issues {
        writeln!(out, "{}", serde_json::to_string(i)?)?;
    }
    let bad: BTreeSet<usize> = issues.iter().map(|i| i.line).collect();
    eprintln!("{} of {} parse(s) ok", predictions.len() - bad.len(), predictions.len());
    Ok(if issues.is_empty() { Status::Ok } else { Status::Partial })
}

fn render(a: RenderArgs) -> Result<Status> {
    let graphs: Vec<(usize, SceneGraph)> = match &a.input {
        Some(p) => read_jsonl_file(p)?,
        None => spice_core::io::read_jsonl(io::stdin().lock())?,
    };
    let mut out = io::stdout().lock();
    for (i, (_, g)) in graphs.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        let map = a.seed.map(|s| random_id_assignment(g, s));
        writeln!(out, "{}", render_context(g, map.as_ref())?)?;
    }
    if graphs.is_empty() {
        log::warn!("no scene graphs to render");
    }
    Ok(Status::Ok)
}
