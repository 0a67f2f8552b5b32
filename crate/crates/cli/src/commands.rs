//! Subcommands and their exit codes.
//!
//! | code | meaning                                          |
//! |------|--------------------------------------------------|
//! | 0    | success                                          |
//! | 1    | some items failed; the rest were written         |
//! | 2    | configuration or usage error                     |
//! | 3    | input/output error                               |
//! | 4    | annotation backend unreachable                   |
//! | 5    | predictions and golds are not aligned            |

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use rpg_core::backend::{
    AnnotationClient, AnnotationScriptEntry, BackendError, LmBackend, LmRequest, LmResponse,
    ScriptEntry, ScriptedAnnotationClient, SentenceScorer,
};
use rpg_core::dataset::{build_record, dataset_stats, DatasetKind, RecordLine, SourceExample};
use rpg_core::metrics::{evaluate_run, EvalError, GoldRecord, Metric, Normalization};
use rpg_core::orchestrator::{BackendProvider, BatchQuery, Engine, QueryTask, SharedBackend};
use rpg_core::retrieval::{Document, EvidenceMode, LexicalIndex, LexicalScorer, Retriever};
use rpg_core::MockLmBackend;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{check_url, BackendConfig, ConfigError, EngineConfig};
use crate::http::{HttpAnnotation, HttpLm, HttpReranker, RetryPolicy};
use crate::io::{read_json, read_jsonl, IoError, JsonlWriter, Timings, TraceLine};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("annotation backend unreachable: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Misaligned(EvalError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Read { .. }) => 3,
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Io(_) | CliError::Input(_) => 3,
            CliError::Unreachable(_) => 4,
            CliError::Misaligned(_) => 5,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rpg", version, about = "Retrieve-plan-generate engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer a JSONL file of queries.
    Infer(InferArgs),
    /// Annotate source examples into training records.
    BuildDataset(BuildArgs),
    /// Score inference output against gold answers.
    Eval(EvalArgs),
    /// Summarize a file of training records.
    Stats(StatsArgs),
}

/// Parses a snake_case enum value through its serde name.
fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    /// JSONL of {"id", "question", "task"}.
    #[arg(long)]
    pub queries: PathBuf,
    /// JSONL of {"doc_id", "title", "body"}; needed unless evidence is disabled.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Record time spent in language-model calls (makes output nondeterministic).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ClientKind {
    Script,
    Url,
}

#[derive(Debug, Clone, Args)]
pub struct BuildArgs {
    /// JSONL of source examples.
    #[arg(long)]
    pub source: PathBuf,
    /// short_form, asqa, share_gpt or hotpot_qa; examples without a kind get this one.
    #[arg(long, value_parser = serde_enum::<DatasetKind>)]
    pub kind: DatasetKind,
    #[arg(long, value_enum)]
    pub client: ClientKind,
    /// JSON array of {"task", "key", "response"} for `--client script`.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Annotation service for `--client url`; overrides the config file.
    #[arg(long)]
    pub url: Option<String>,
    /// Supplies timeouts, retries and `annotation_url`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// `infer` output.
    #[arg(long)]
    pub traces: PathBuf,
    /// JSONL of {"id", "golds"} in the same order as the traces.
    #[arg(long)]
    pub golds: PathBuf,
    /// short, long or multihop.
    #[arg(long, value_parser = serde_enum::<QueryTask>)]
    pub task: QueryTask,
    /// Comma-separated; defaults to the config's metrics, then the task's.
    #[arg(long, value_delimiter = ',', value_parser = serde_enum::<Metric>)]
    pub metrics: Option<Vec<Metric>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Drop "a", "an" and "the" before comparing.
    #[arg(long)]
    pub strip_articles: bool,
    /// Write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    /// `build-dataset` output.
    #[arg(long)]
    pub records: PathBuf,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Infer(a) => infer(&a),
        Command::BuildDataset(a) => build_dataset(&a),
        Command::Eval(a) => eval(&a).map(|report| {
            print!("{}", report.to_table());
            0
        }),
        Command::Stats(a) => stats(&a).map(|s| {
            println!("{}", serde_json::to_string_pretty(&s).expect("stats serialize"));
            0
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Replays a per-query script; each query gets a fresh cursor.
pub struct ScriptProvider {
    scripts: HashMap<String, Vec<ScriptEntry>>,
}

impl ScriptProvider {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        Ok(ScriptProvider {
            scripts: read_json(path)?,
        })
    }
}

impl BackendProvider for ScriptProvider {
    fn backend_for(&self, q: &BatchQuery) -> Result<Arc<dyn LmBackend>, BackendError> {
        match self.scripts.get(&q.id) {
            Some(s) => Ok(Arc::new(MockLmBackend::new(s.clone()))),
            None => Err(BackendError::NoScriptedResponse(q.id.clone())),
        }
    }
}

struct TimedBackend {
    inner: Arc<dyn LmBackend>,
    spent: Mutex<Duration>,
}

impl LmBackend for TimedBackend {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, BackendError> {
        let start = Instant::now();
        let out = self.inner.generate(request);
        *self.spent.lock().unwrap() += start.elapsed();
        out
    }
}

struct TimedProvider<'a> {
    inner: &'a dyn BackendProvider,
    backends: Mutex<HashMap<String, Arc<TimedBackend>>>,
}

impl BackendProvider for TimedProvider<'_> {
    fn backend_for(&self, q: &BatchQuery) -> Result<Arc<dyn LmBackend>, BackendError> {
        let timed = Arc::new(TimedBackend {
            inner: self.inner.backend_for(q)?,
            spent: Mutex::new(Duration::ZERO),
        });
        self.backends.lock().unwrap().insert(q.id.clone(), timed.clone());
        Ok(timed)
    }
}

fn load_index(corpus: Option<&Path>, mode: EvidenceMode) -> Result<Option<LexicalIndex>, CliError> {
    let path = match (corpus, mode) {
        (_, EvidenceMode::Disabled) => return Ok(None),
        (Some(p), _) => p,
        (None, _) => {
            return Err(CliError::Usage(
                "--corpus is required unless evidence_mode is \"disabled\"".into(),
            ))
        }
    };
    let docs: Vec<Document> = read_jsonl(path)?;
    LexicalIndex::build(docs)
        .map(Some)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn infer(args: &InferArgs) -> Result<u8, CliError> {
    let config = EngineConfig::load(&args.config)?;
    let template = config.template_text()?;
    let queries: Vec<BatchQuery> = read_jsonl(&args.queries)?;
    let mut seen = HashSet::new();
    if let Some(q) = queries.iter().find(|q| !seen.insert(q.id.as_str())) {
        return Err(CliError::Input(format!("duplicate query id {:?}", q.id)));
    }
    let index = load_index(args.corpus.as_deref(), config.run.evidence_mode)?;

    let policy = RetryPolicy::from_config(&config.backends);
    let reranker = config
        .backends
        .reranker_url
        .as_deref()
        .map(|u| HttpReranker::new(u, policy));
    let scorer: &dyn SentenceScorer = match &reranker {
        Some(r) => r,
        None => &LexicalScorer,
    };
    let retriever = index.as_ref().map(|i| i as &dyn Retriever);
    let engine = Engine::new(retriever, scorer, config.run.clone())
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let provider: Box<dyn BackendProvider> = match (&config.backends.lm_url, &config.backends.mock_script) {
        (Some(url), _) => Box::new(SharedBackend(Arc::new(HttpLm::new(url, policy, template)))),
        (None, Some(script)) => Box::new(ScriptProvider::load(script)?),
        (None, None) => unreachable!("validated config has an LM source"),
    };
    let timed = TimedProvider {
        inner: provider.as_ref(),
        backends: Mutex::new(HashMap::new()),
    };
    let outcomes = if args.timings {
        engine.run_batch(&queries, &timed, config.in_flight)
    } else {
        engine.run_batch(&queries, provider.as_ref(), config.in_flight)
    };

    let spent = timed.backends.into_inner().unwrap();
    let mut writer = JsonlWriter::create(&args.out)?;
    let mut failures = 0;
    for (q, outcome) in queries.iter().zip(&outcomes) {
        let mut line = TraceLine::new(&q.id, q.task, outcome);
        if let Some(e) = &line.error {
            failures += 1;
            log::warn!("query {}: {e}", q.id);
        }
        if args.timings {
            let lm = spent.get(&q.id).map_or(Duration::ZERO, |b| *b.spent.lock().unwrap());
            line.timings = Some(Timings {
                lm_ms: lm.as_secs_f64() * 1e3,
            });
        }
        writer.push(&line)?;
    }
    writer.finish()?;
    log::info!("{} queries, {failures} failed", queries.len());
    Ok(u8::from(failures > 0))
}

/// A source line that could not become a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line in the source file.
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub error: String,
}

pub fn rejects_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".rejects");
    PathBuf::from(s)
}

fn annotation_client(args: &BuildArgs) -> Result<Box<dyn AnnotationClient>, CliError> {
    let config = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.clone(),
                source,
            })?;
            // only the backend section matters here; no LM source required
            EngineConfig::from_toml(&text)
                .map_err(|message| ConfigError::Parse {
                    path: p.clone(),
                    message,
                })?
                .backends
        }
        None => BackendConfig::default(),
    };
    match args.client {
        ClientKind::Script => {
            let path = args
                .script
                .as_ref()
                .ok_or_else(|| CliError::Usage("--client script needs --script".into()))?;
            let entries: Vec<AnnotationScriptEntry> = read_json(path)?;
            Ok(Box::new(ScriptedAnnotationClient::new(entries)))
        }
        ClientKind::Url => {
            let url = args
                .url
                .clone()
                .or(config.annotation_url.clone())
                .ok_or_else(|| CliError::Usage("--client url needs --url or annotation_url".into()))?;
            check_url("annotation url", &url)?;
            Ok(Box::new(HttpAnnotation::new(&url, RetryPolicy::from_config(&config))))
        }
    }
}

fn read_source(path: &Path, kind: DatasetKind) -> Result<Vec<Result<SourceExample, String>>, IoError> {
    let lines: Vec<serde_json::Value> = read_jsonl(path)?;
    let kind_value = serde_json::to_value(kind).expect("kind serializes");
    Ok(lines
        .into_iter()
        .map(|mut v| {
            if let Some(obj) = v.as_object_mut() {
                let given = obj.entry("dataset_kind").or_insert(kind_value.clone());
                if *given != kind_value {
                    return Err(format!("dataset_kind {given} does not match --kind {kind_value}"));
                }
            }
            serde_json::from_value(v).map_err(|e| e.to_string())
        })
        .collect())
}

pub fn build_dataset(args: &BuildArgs) -> Result<u8, CliError> {
    let client = annotation_client(args)?;
    let examples = read_source(&args.source, args.kind)?;
    let mut records = JsonlWriter::create(&args.out)?;
    let mut rejects = JsonlWriter::create(&rejects_path(&args.out))?;
    let mut rejected = 0;
    for (i, example) in examples.iter().enumerate() {
        let built = match example {
            Ok(ex) => match build_record(ex, client.as_ref()) {
                Ok(outcome) => Ok(RecordLine::new(ex, outcome)),
                Err(e) if e.is_unavailable() => return Err(CliError::Unreachable(e.to_string())),
                Err(e) => Err(e.to_string()),
            },
            Err(e) => Err(e.clone()),
        };
        match built {
            Ok(line) => records.push(&line)?,
            Err(error) => {
                rejected += 1;
                log::warn!("source line {}: {error}", i + 1);
                rejects.push(&Reject {
                    line: i + 1,
                    id: example.as_ref().ok().and_then(|e| e.id.clone()),
                    error,
                })?;
            }
        }
    }
    records.finish()?;
    rejects.finish()?;
    log::info!("{} records, {rejected} rejected", examples.len() - rejected);
    Ok(u8::from(rejected > 0))
}

/// `id` and `final_answer` of an `infer` output line.
#[derive(Debug, Deserialize)]
struct Prediction {
    id: String,
    final_answer: String,
}

pub fn eval(args: &EvalArgs) -> Result<rpg_core::metrics::EvalReport, CliError> {
    let configured = match &args.config {
        Some(p) => EngineConfig::load(p)?.metrics,
        None => None,
    };
    let metrics = args
        .metrics
        .clone()
        .or(configured)
        .unwrap_or_else(|| Metric::for_task(args.task));
    if metrics.is_empty() {
        return Err(CliError::Usage("no metrics selected".into()));
    }
    let predictions: Vec<Prediction> = read_jsonl(&args.traces)?;
    let golds: Vec<GoldRecord> = read_jsonl(&args.golds)?;
    let pairs: Vec<(String, String)> = predictions
        .into_iter()
        .map(|p| (p.id, p.final_answer))
        .collect();
    let norm = Normalization {
        strip_articles: args.strip_articles,
    };
    let report =
        evaluate_run(&pairs, &golds, args.task, &metrics, norm).map_err(CliError::Misaligned)?;
    for m in &report.unsupported {
        log::warn!("metric {} is not supported; reported as null", m.name());
    }
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(out, text + "\n").map_err(|source| IoError::Io {
            path: out.clone(),
            source,
        })?;
    }
    Ok(report)
}

pub fn stats(args: &StatsArgs) -> Result<rpg_core::dataset::DatasetStats, CliError> {
    let lines: Vec<RecordLine> = read_jsonl(&args.records)?;
    let records: Vec<_> = lines.iter().map(RecordLine::record).collect();
    Ok(dataset_stats(&records))
}
