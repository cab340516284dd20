//! Batch drivers: scoring prediction files against a dataset (one step at
//! a time or along annotated sequences) and building a dataset from raw
//! scenes.
//!
//! A prediction that is missing, does not parse, or fails to execute is
//! scored as an empty update and annotated; it never aborts the run.
//! Schema problems in the input files do.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    clean_label, dedup_nodes, filter_scene, sample_context_pairs_with, standardize, to_scene_graph, CurationConfig,
    DatasetError, DatasetStats, PosLexicon, RawScene, SamplePair, SamplingConfig, VocabCounts,
};
use crate::formal_language::{execute, parse_program};
use crate::io::{read_jsonl, JsonlError};
use crate::metrics::{graph_phrases, score_sample, stable_sum, Annotation, MetricError, MetricReport, ScoreConfig};
use crate::scene_graph::SceneGraph;
use crate::similarity::{EmbeddingTable, ExactSimilarity, JaccardSimilarity, SimilarityError, SimilarityProvider};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Schema { path: String, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sample {sample_id}: {source}")]
    Metric {
        sample_id: String,
        #[source]
        source: MetricError,
    },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl HarnessError {
    fn schema(path: &str, line: usize, message: impl Into<String>) -> Self {
        HarnessError::Schema {
            path: path.to_string(),
            line,
            message: message.into(),
        }
    }
}

/// Runs `f` over `items` on up to `degree` threads. Output order follows
/// input order whatever the degree.
pub fn parallel_map<T, R, F>(items: &[T], degree: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let degree = degree.clamp(1, items.len().max(1));
    if degree == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = items.iter().map(|_| None).collect();
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..degree)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break done;
                        }
                        done.push((i, f(i, &items[i])));
                    }
                })
            })
            .collect();
        for w in workers {
            for (i, r) in w.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every index is processed"))
        .collect()
}

pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, HarnessError> {
    let file = File::open(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_jsonl(BufReader::new(file)).map_err(|e| match e {
        JsonlError::Schema { line, message } => HarnessError::schema(&path.display().to_string(), line, message),
        JsonlError::Io(source) => HarnessError::Io {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// Where RED similarities come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProviderSpec {
    Exact,
    Jaccard,
    /// Precomputed embeddings in the JSONL table format.
    Table(PathBuf),
    /// An embedding service; `model` labels its vectors in the cache.
    Remote {
        endpoint: String,
        model: String,
    },
}

/// `exact`, `jaccard`, `table:PATH` or `remote:URL[#MODEL]`.
impl FromStr for ProviderSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(ProviderSpec::Exact),
            "jaccard" => Ok(ProviderSpec::Jaccard),
            _ => {
                if let Some(path) = s.strip_prefix("table:") {
                    Ok(ProviderSpec::Table(PathBuf::from(path)))
                } else if let Some(rest) = s.strip_prefix("remote:") {
                    let (endpoint, model) = rest.split_once('#').unwrap_or((rest, rest));
                    Ok(ProviderSpec::Remote {
                        endpoint: endpoint.to_string(),
                        model: model.to_string(),
                    })
                } else {
                    Err(HarnessError::Config(format!(
                        "unknown provider {s:?}; expected exact, jaccard, table:PATH or remote:URL[#MODEL]"
                    )))
                }
            }
        }
    }
}

impl ProviderSpec {
    /// Builds the provider. A remote provider embeds `phrases` up front so
    /// scoring itself never touches the network.
    pub fn resolve(&self, phrases: &[String]) -> Result<Box<dyn SimilarityProvider>, HarnessError> {
        match self {
            ProviderSpec::Exact => Ok(Box::new(ExactSimilarity)),
            ProviderSpec::Jaccard => Ok(Box::new(JaccardSimilarity)),
            ProviderSpec::Table(path) => Ok(Box::new(EmbeddingTable::load(path)?)),
            ProviderSpec::Remote { endpoint, model } => remote_provider(endpoint, model, phrases),
        }
    }

    pub fn needs_phrases(&self) -> bool {
        matches!(self, ProviderSpec::Remote { .. })
    }
}

#[cfg(feature = "remote")]
fn remote_provider(
    endpoint: &str,
    model: &str,
    phrases: &[String],
) -> Result<Box<dyn SimilarityProvider>, HarnessError> {
    let cache = crate::similarity::EmbeddingCache::from_env()?;
    Ok(Box::new(crate::similarity::fetch_embeddings(
        endpoint, model, phrases, cache,
    )?))
}

#[cfg(not(feature = "remote"))]
fn remote_provider(_: &str, _: &str, _: &[String]) -> Result<Box<dyn SimilarityProvider>, HarnessError> {
    Err(HarnessError::Config("built without remote embedding support".into()))
}

fn phrases_of<'a>(graphs: impl IntoIterator<Item = &'a SceneGraph>) -> Vec<String> {
    let set: BTreeSet<String> = graphs.into_iter().flat_map(graph_phrases).collect();
    set.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub parse: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPrediction {
    pub scene_id: String,
    pub step: usize,
    pub parse: String,
}

/// Result of applying a prediction to a context.
#[derive(Clone, Debug)]
struct Applied {
    graph: SceneGraph,
    error: Option<Annotation>,
    message: Option<String>,
}

impl Applied {
    fn empty(prior: &SceneGraph, error: Annotation, message: Option<String>) -> Self {
        Applied {
            graph: prior.clone(),
            error: Some(error),
            message,
        }
    }
}

fn apply_prediction(parse: Option<&str>, prior: &SceneGraph) -> Applied {
    let Some(text) = parse else {
        return Applied::empty(prior, Annotation::Missing, None);
    };
    let program = match parse_program(text) {
        Ok(p) => p,
        Err(e) => return Applied::empty(prior, Annotation::ParseError, Some(e.to_string())),
    };
    match execute(&program, prior) {
        Ok(graph) => Applied {
            graph,
            error: None,
            message: None,
        },
        Err(e) => Applied::empty(prior, Annotation::ExecError, Some(e.to_string())),
    }
}

/// Means over samples; a metric that no sample produced stays empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_ged: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_ged: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_red: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_red: Option<f64>,
    pub red_undefined: usize,
    pub parse_errors: usize,
    pub exec_errors: usize,
    pub missing: usize,
    pub missing_upstream: usize,
    pub approximate: usize,
}

impl Aggregate {
    pub fn from_reports(reports: &[MetricReport]) -> Self {
        let mean = |get: fn(&MetricReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(get).collect();
            (!vals.is_empty()).then(|| stable_sum(&vals) / vals.len() as f64)
        };
        let count = |a: Annotation| reports.iter().filter(|r| r.error == Some(a)).count();
        Self {
            samples: reports.len(),
            h_ged: mean(|r| r.h_ged),
            s_ged: mean(|r| r.s_ged),
            h_red: mean(|r| r.h_red),
            s_red: mean(|r| r.s_red),
            red_undefined: reports
                .iter()
                .filter(|r| r.notes.iter().any(|n| n == "red-undefined"))
                .count(),
            parse_errors: count(Annotation::ParseError),
            exec_errors: count(Annotation::ExecError),
            missing: count(Annotation::Missing),
            missing_upstream: count(Annotation::MissingUpstream),
            approximate: reports.iter().filter(|r| r.approximate).count(),
        }
    }

    /// Samples scored as empty updates because of a prediction problem.
    pub fn errored(&self) -> usize {
        self.parse_errors + self.exec_errors + self.missing + self.missing_upstream
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStyle {
    SingleStep,
    /// Each step starts from the ground-truth context of the previous step.
    SequentialGroundTruth,
    /// Each step starts from the context predicted so far.
    SequentialCarried,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub dataset: PathBuf,
    pub predictions: PathBuf,
    pub score: ScoreConfig,
    pub provider: ProviderSpec,
    pub parallelism: usize,
    pub style: EvalStyle,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.score.cap == 0 {
            return Err(HarnessError::Config("pairing cap must be at least 1".into()));
        }
        for p in [&self.dataset, &self.predictions] {
            if !p.exists() {
                return Err(HarnessError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutput {
    pub reports: Vec<MetricReport>,
    pub aggregate: Aggregate,
}

struct Job<'a> {
    id: String,
    prior: &'a SceneGraph,
    reference: &'a SceneGraph,
    applied: Applied,
}

fn score_jobs(
    jobs: &[Job<'_>],
    score: &ScoreConfig,
    providers: &ProviderSpec,
    parallelism: usize,
) -> Result<Vec<MetricReport>, HarnessError> {
    let phrases = if providers.needs_phrases() {
        phrases_of(jobs.iter().flat_map(|j| [j.prior, j.reference, &j.applied.graph]))
    } else {
        Vec::new()
    };
    let provider = providers.resolve(&phrases)?;
    let provider: &dyn SimilarityProvider = provider.as_ref();
    parallel_map(jobs, parallelism, |_, job| {
        let mut report =
            score_sample(&job.id, &job.applied.graph, job.reference, job.prior, score, provider).map_err(|source| {
                HarnessError::Metric {
                    sample_id: job.id.clone(),
                    source,
                }
            })?;
        report.error = job.applied.error;
        report.message = job.applied.message.clone();
        Ok(report)
    })
    .into_iter()
    .collect()
}

/// Scores predictions (`sample_id` to parse text) against `samples`.
pub fn evaluate_samples(
    samples: &[SamplePair],
    predictions: &HashMap<String, String>,
    score: &ScoreConfig,
    provider: &ProviderSpec,
    parallelism: usize,
) -> Result<EvalOutput, HarnessError> {
    let applied = parallel_map(samples, parallelism, |_, s| {
        apply_prediction(predictions.get(&s.sample_id).map(String::as_str), &s.prior)
    });
    let jobs: Vec<Job<'_>> = samples
        .iter()
        .zip(applied)
        .map(|(s, applied)| Job {
            id: s.sample_id.clone(),
            prior: &s.prior,
            reference: &s.reference,
            applied,
        })
        .collect();
    let reports = score_jobs(&jobs, score, provider, parallelism)?;
    let aggregate = Aggregate::from_reports(&reports);
    Ok(EvalOutput { reports, aggregate })
}

pub fn load_samples(path: &Path) -> Result<Vec<SamplePair>, HarnessError> {
    let rows: Vec<(usize, SamplePair)> = read_jsonl_file(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, s) in rows {
        if !seen.insert(s.sample_id.clone()) {
            return Err(HarnessError::schema(
                &path.display().to_string(),
                line,
                format!("duplicate sample_id {:?}", s.sample_id),
            ));
        }
        if let Some(v) = s.reference.additive_violation(&s.prior) {
            return Err(HarnessError::schema(
                &path.display().to_string(),
                line,
                format!("reference does not extend prior: {v}"),
            ));
        }
        out.push(s);
    }
    Ok(out)
}

/// Predictions keyed by sample id. Ids unknown to `known` and repeated ids
/// are schema errors.
pub fn load_predictions(path: &Path, known: &BTreeSet<&str>) -> Result<HashMap<String, String>, HarnessError> {
    let rows: Vec<(usize, Prediction)> = read_jsonl_file(path)?;
    let mut out = HashMap::with_capacity(rows.len());
    for (line, p) in rows {
        if !known.contains(p.sample_id.as_str()) {
            return Err(HarnessError::schema(
                &path.display().to_string(),
                line,
                format!("unknown sample_id {:?}", p.sample_id),
            ));
        }
        if out.insert(p.sample_id.clone(), p.parse).is_some() {
            return Err(HarnessError::schema(
                &path.display().to_string(),
                line,
                format!("duplicate sample_id {:?}", p.sample_id),
            ));
        }
    }
    Ok(out)
}

/// Single-step evaluation of a prediction file against a dataset file.
pub fn evaluate(cfg: &EvalConfig) -> Result<EvalOutput, HarnessError> {
    cfg.validate()?;
    if cfg.style != EvalStyle::SingleStep {
        return Err(HarnessError::Config(
            "sequential styles take a sequence file; use evaluate_sequence_files".into(),
        ));
    }
    let samples = load_samples(&cfg.dataset)?;
    let known: BTreeSet<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
    let predictions = load_predictions(&cfg.predictions, &known)?;
    evaluate_samples(&samples, &predictions, &cfg.score, &cfg.provider, cfg.parallelism)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceStep {
    pub step: usize,
    pub reference: SceneGraph,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
}

/// A scene described over several rounds. `initial` is the context before
/// the first step (empty when absent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default)]
    pub initial: SceneGraph,
    pub steps: Vec<SequenceStep>,
}

impl SequenceSample {
    pub fn validate(&self) -> Result<(), String> {
        let mut previous = &self.initial;
        for (i, s) in self.steps.iter().enumerate() {
            if s.step != i + 1 {
                return Err(format!(
                    "steps must run 1, 2, ...; found {} at position {}",
                    s.step,
                    i + 1
                ));
            }
            if let Some(v) = s.reference.additive_violation(previous) {
                return Err(format!("step {} does not extend the previous context: {v}", s.step));
            }
            previous = &s.reference;
        }
        Ok(())
    }

    fn step_id(&self, step: usize) -> String {
        format!("{}/{}", self.scene_id, step)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneSummary {
    pub scene_id: String,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceOutput {
    pub style: EvalStyle,
    /// Set for carried evaluation, which goes beyond single-step scoring.
    pub extension: bool,
    /// One report per step, ids `scene/step`.
    pub steps: Vec<MetricReport>,
    pub scenes: Vec<SceneSummary>,
    pub aggregate: Aggregate,
}

/// Scores step predictions along each sequence. In carried style the
/// metrics compare against the sequence's initial context, since the
/// predicted and ground-truth contexts diverge after the first step.
pub fn evaluate_sequences(
    sequences: &[SequenceSample],
    predictions: &HashMap<(String, usize), String>,
    style: EvalStyle,
    score: &ScoreConfig,
    provider: &ProviderSpec,
    parallelism: usize,
) -> Result<SequenceOutput, HarnessError> {
    if style == EvalStyle::SingleStep {
        return Err(HarnessError::Config(
            "sequence evaluation needs a sequential style".into(),
        ));
    }
    let applied: Vec<Vec<Applied>> = parallel_map(sequences, parallelism, |_, seq| {
        let lookup = |step: usize| predictions.get(&(seq.scene_id.clone(), step)).map(String::as_str);
        let mut out = Vec::with_capacity(seq.steps.len());
        match style {
            EvalStyle::SequentialGroundTruth => {
                let mut prior = &seq.initial;
                for s in &seq.steps {
                    out.push(apply_prediction(lookup(s.step), prior));
                    prior = &s.reference;
                }
            }
            _ => {
                let mut carried = seq.initial.clone();
                let mut upstream_missing = false;
                for s in &seq.steps {
                    let a = if upstream_missing {
                        Applied::empty(&carried, Annotation::MissingUpstream, None)
                    } else {
                        apply_prediction(lookup(s.step), &carried)
                    };
                    upstream_missing |= a.error == Some(Annotation::Missing);
                    carried = a.graph.clone();
                    out.push(a);
                }
            }
        }
        out
    });

    let mut jobs = Vec::new();
    for (seq, applied) in sequences.iter().zip(applied) {
        for (i, (s, a)) in seq.steps.iter().zip(applied).enumerate() {
            let prior = match style {
                EvalStyle::SequentialGroundTruth if i > 0 => &seq.steps[i - 1].reference,
                _ => &seq.initial,
            };
            jobs.push(Job {
                id: seq.step_id(s.step),
                prior,
                reference: &s.reference,
                applied: a,
            });
        }
    }
    let steps = score_jobs(&jobs, score, provider, parallelism)?;
    let mut scenes = Vec::with_capacity(sequences.len());
    let mut offset = 0;
    for seq in sequences {
        let n = seq.steps.len();
        scenes.push(SceneSummary {
            scene_id: seq.scene_id.clone(),
            aggregate: Aggregate::from_reports(&steps[offset..offset + n]),
        });
        offset += n;
    }
    let aggregate = Aggregate::from_reports(&steps);
    Ok(SequenceOutput {
        style,
        extension: style == EvalStyle::SequentialCarried,
        steps,
        scenes,
        aggregate,
    })
}

pub fn load_sequences(path: &Path) -> Result<Vec<SequenceSample>, HarnessError> {
    let rows: Vec<(usize, SequenceSample)> = read_jsonl_file(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, s) in rows {
        let p = path.display().to_string();
        if !seen.insert(s.scene_id.clone()) {
            return Err(HarnessError::schema(
                &p,
                line,
                format!("duplicate scene_id {:?}", s.scene_id),
            ));
        }
        s.validate().map_err(|m| HarnessError::schema(&p, line, m))?;
        out.push(s);
    }
    Ok(out)
}

pub fn load_step_predictions(
    path: &Path,
    sequences: &[SequenceSample],
) -> Result<HashMap<(String, usize), String>, HarnessError> {
    let known: BTreeSet<(&str, usize)> = sequences
        .iter()
        .flat_map(|s| s.steps.iter().map(|t| (s.scene_id.as_str(), t.step)))
        .collect();
    let rows: Vec<(usize, StepPrediction)> = read_jsonl_file(path)?;
    let mut out = HashMap::with_capacity(rows.len());
    for (line, p) in rows {
        let p_path = path.display().to_string();
        if !known.contains(&(p.scene_id.as_str(), p.step)) {
            return Err(HarnessError::schema(
                &p_path,
                line,
                format!("unknown step {}/{}", p.scene_id, p.step),
            ));
        }
        let key = (p.scene_id.clone(), p.step);
        if out.insert(key, p.parse).is_some() {
            return Err(HarnessError::schema(
                &p_path,
                line,
                format!("duplicate step {}/{}", p.scene_id, p.step),
            ));
        }
    }
    Ok(out)
}

pub fn evaluate_sequence_files(cfg: &EvalConfig) -> Result<SequenceOutput, HarnessError> {
    cfg.validate()?;
    let sequences = load_sequences(&cfg.dataset)?;
    let predictions = load_step_predictions(&cfg.predictions, &sequences)?;
    evaluate_sequences(
        &sequences,
        &predictions,
        cfg.style,
        &cfg.score,
        &cfg.provider,
        cfg.parallelism,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildConfig {
    pub curation: CurationConfig,
    pub sampling: SamplingConfig,
    pub pairs_per_scene: usize,
    pub seed: u64,
    pub parallelism: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            curation: CurationConfig::default(),
            sampling: SamplingConfig::default(),
            pairs_per_scene: 6,
            seed: 0,
            parallelism: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOutput {
    pub samples: Vec<SamplePair>,
    pub stats: DatasetStats,
}

/// Curates `scenes` and samples update pairs from the survivors. Scene `i`
/// of the input draws from its own random stream, so the output depends on
/// the seed and the input alone, not on `parallelism`.
pub fn build_dataset(
    scenes: &[RawScene],
    pos: Option<&PosLexicon>,
    provider: &ProviderSpec,
    cfg: &BuildConfig,
) -> Result<BuildOutput, HarnessError> {
    cfg.curation.validate()?;
    if scenes.is_empty() {
        log::warn!("no input scenes; the dataset is empty");
    }
    let phrases: Vec<String> = if provider.needs_phrases() {
        let set: BTreeSet<String> = scenes
            .iter()
            .flat_map(|s| {
                s.nodes
                    .iter()
                    .flat_map(|n| std::iter::once(&n.name).chain(&n.attributes))
            })
            .map(|t| clean_label(t))
            .collect();
        set.into_iter().collect()
    } else {
        Vec::new()
    };
    let provider = provider.resolve(&phrases)?;
    let provider: &dyn SimilarityProvider = provider.as_ref();

    let curated = parallel_map(scenes, cfg.parallelism, |_, raw| {
        let clean = standardize(raw, &cfg.curation, provider, pos)?;
        dedup_nodes(&clean, &cfg.curation, provider).map(|(s, _)| s)
    })
    .into_iter()
    .collect::<Result<Vec<_>, DatasetError>>()?;

    let vocab = VocabCounts::from_scenes(&curated);

    let per_scene = parallel_map(&curated, cfg.parallelism, |i, scene| -> Result<_, DatasetError> {
        let Some(kept) = filter_scene(scene, &cfg.curation, &vocab) else {
            log::debug!("scene {:?} removed by the size filter", scene.scene_id);
            return Ok(None);
        };
        let graph = to_scene_graph(&kept)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let mut pairs = sample_context_pairs_with(&graph, &mut rng, cfg.pairs_per_scene, &cfg.sampling);
        for p in &mut pairs {
            p.image = kept.image.clone();
        }
        Ok(Some((graph, pairs)))
    });

    let mut graphs = Vec::new();
    let mut samples = Vec::new();
    for r in per_scene {
        if let Some((g, pairs)) = r? {
            graphs.push(g);
            samples.extend(pairs);
        }
    }
    let stats = DatasetStats::compute(scenes.len(), &graphs, &curated, &samples);
    Ok(BuildOutput { samples, stats })
}

/// A problem found by [`check_predictions`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParseIssue {
    pub line: usize,
    pub sample_id: String,
    pub error: Annotation,
    pub message: String,
}

/// Parses every prediction and, when the samples are known, executes it
/// against its prior.
pub fn check_predictions(predictions: &[(usize, Prediction)], samples: Option<&[SamplePair]>) -> Vec<ParseIssue> {
    let priors: Option<HashMap<&str, &SceneGraph>> =
        samples.map(|s| s.iter().map(|p| (p.sample_id.as_str(), &p.prior)).collect());
    let mut issues = Vec::new();
    for (line, p) in predictions {
        let issue = |error, message: String| ParseIssue {
            line: *line,
            sample_id: p.sample_id.clone(),
            error,
            message,
        };
        let program = match parse_program(&p.parse) {
            Ok(prog) => prog,
            Err(e) => {
                issues.push(issue(Annotation::ParseError, e.to_string()));
                continue;
            }
        };
        if let Some(priors) = &priors {
            match priors.get(p.sample_id.as_str()) {
                None => issues.push(issue(Annotation::Missing, "no such sample in the dataset".into())),
                Some(prior) => {
                    if let Err(e) = execute(&program, prior) {
                        issues.push(issue(Annotation::ExecError, e.to_string()));
                    }
                }
            }
        }
    }
    issues
}
