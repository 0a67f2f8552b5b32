//! The plan/answer inference loop.
//!
//! For each query the engine asks the backend for a plan. A
//! `<NOT_NEED_EXTRA_INFO>` plan short-circuits to a single evidence-free
//! answer. Otherwise passages are retrieved once for the query, and each
//! iteration selects evidence for the current plan, requests an answer
//! segment, then requests the next plan. The loop ends on `<EOS>`, on the
//! iteration cap, or when a plan repeats verbatim.

use std::collections::HashSet;
use std::sync::Arc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, ContextPart, FinishReason, FailureCause, HistoryTurn, LmBackend, LmMode,
    LmRequest, SentenceScorer,
};
use crate::grammar::{
    parse_answer_output, parse_plan_output, AnswerOutput, GenerationTrace, GrammarError,
    MalformedAnswer, MarkerKind, PlanOutput, Segment, Termination,
};
use crate::retrieval::{select_evidence, EvidenceError, EvidenceMode, Passage, RetrievalError, Retriever};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plan_token_cap: usize,
    pub answer_token_cap: usize,
    pub max_iterations: usize,
    pub retrieval_k: usize,
    /// Number of evidence sentences kept per plan.
    pub evidence_k: usize,
    pub evidence_mode: EvidenceMode,
    pub stop_on_plan_repeat: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            plan_token_cap: 30,
            answer_token_cap: 100,
            max_iterations: 3,
            retrieval_k: 5,
            evidence_k: 5,
            evidence_mode: EvidenceMode::Selected,
            stop_on_plan_repeat: true,
        }
    }
}

impl RunConfig {
    /// Outputs longer than this many whitespace words are truncated.
    pub const WORD_CEILING_FACTOR: usize = 4;

    pub fn validate(&self) -> Result<(), ConfigError> {
        let caps = [
            ("plan_token_cap", self.plan_token_cap),
            ("answer_token_cap", self.answer_token_cap),
            ("max_iterations", self.max_iterations),
            ("retrieval_k", self.retrieval_k),
            ("evidence_k", self.evidence_k),
        ];
        match caps.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ConfigError::ZeroCap(name)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroCap(&'static str),
    #[error("evidence mode {0:?} needs a retriever")]
    MissingRetriever(EvidenceMode),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("malformed {mode:?} generation: {error}")]
    MalformedGeneration { mode: LmMode, error: GrammarError },
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("evidence selection failed: {0}")]
    Evidence(#[from] EvidenceError),
}

/// Call counters for one query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub plan_calls: usize,
    pub answer_calls: usize,
    pub retrievals: usize,
    pub evidence_selections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    /// Complete, or the partial trace built before `error`.
    pub trace: GenerationTrace,
    pub error: Option<RunError>,
    pub stats: RunStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTask {
    /// One plan/answer cycle.
    Short,
    #[default]
    Long,
    /// Long-form loop plus `[Combine]` summarization.
    Multihop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchQuery {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub task: QueryTask,
}

/// Supplies the backend a query runs against.
pub trait BackendProvider: Sync {
    fn backend_for(&self, query: &BatchQuery) -> Result<Arc<dyn LmBackend>, BackendError>;
}

/// Every query shares one backend.
pub struct SharedBackend(pub Arc<dyn LmBackend>);

impl BackendProvider for SharedBackend {
    fn backend_for(&self, _: &BatchQuery) -> Result<Arc<dyn LmBackend>, BackendError> {
        Ok(self.0.clone())
    }
}

pub struct Engine<'a> {
    retriever: Option<&'a dyn Retriever>,
    scorer: &'a dyn SentenceScorer,
    config: RunConfig,
}

struct Run<'e, 'a> {
    engine: &'e Engine<'a>,
    backend: &'e dyn LmBackend,
    query: &'e str,
    combine_enabled: bool,
    max_iterations: usize,
    trace: GenerationTrace,
    stats: RunStats,
}

impl<'a> Engine<'a> {
    pub fn new(
        retriever: Option<&'a dyn Retriever>,
        scorer: &'a dyn SentenceScorer,
        config: RunConfig,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        if retriever.is_none() && config.evidence_mode != EvidenceMode::Disabled {
            return Err(ConfigError::MissingRetriever(config.evidence_mode));
        }
        Ok(Engine {
            retriever,
            scorer,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run_query(&self, query: &str, backend: &dyn LmBackend) -> QueryOutcome {
        self.run(query, backend, false, self.config.max_iterations)
    }

    /// As [`Engine::run_query`], but an answer ending in `[Combine]` triggers
    /// one summarizing answer call over all prior segments.
    pub fn run_multihop(&self, query: &str, backend: &dyn LmBackend) -> QueryOutcome {
        self.run(query, backend, true, self.config.max_iterations)
    }

    pub fn run_task(&self, task: QueryTask, query: &str, backend: &dyn LmBackend) -> QueryOutcome {
        match task {
            QueryTask::Short => self.run(query, backend, false, 1),
            QueryTask::Long => self.run_query(query, backend),
            QueryTask::Multihop => self.run_multihop(query, backend),
        }
    }

    /// Runs queries with at most `in_flight` in progress at once. Results
    /// are in input order; a failing query does not affect the others.
    pub fn run_batch(
        &self,
        queries: &[BatchQuery],
        provider: &dyn BackendProvider,
        in_flight: usize,
    ) -> Vec<QueryOutcome> {
        use rayon::prelude::*;
        let one = |q: &BatchQuery| match provider.backend_for(q) {
            Ok(backend) => self.run_task(q.task, &q.question, backend.as_ref()),
            Err(e) => QueryOutcome {
                trace: empty_trace(Some(Termination::Aborted)),
                error: Some(e.into()),
                stats: RunStats::default(),
            },
        };
        match rayon::ThreadPoolBuilder::new()
            .num_threads(in_flight.max(1))
            .build()
        {
            Ok(pool) => pool.install(|| queries.par_iter().map(one).collect()),
            Err(e) => {
                warn!("thread pool unavailable ({e}), running sequentially");
                queries.iter().map(one).collect()
            }
        }
    }

    fn run(
        &self,
        query: &str,
        backend: &dyn LmBackend,
        combine_enabled: bool,
        max_iterations: usize,
    ) -> QueryOutcome {
        let mut run = Run {
            engine: self,
            backend,
            query,
            combine_enabled,
            max_iterations,
            trace: empty_trace(None),
            stats: RunStats::default(),
        };
        let error = run.drive().err();
        if error.is_some() {
            run.trace.terminated_by = Some(Termination::Aborted);
        }
        QueryOutcome {
            trace: run.trace,
            error,
            stats: run.stats,
        }
    }
}

fn malformed_answer(error: GrammarError) -> RunError {
    RunError::MalformedGeneration {
        mode: LmMode::Answer,
        error,
    }
}

fn empty_trace(terminated_by: Option<Termination>) -> GenerationTrace {
    GenerationTrace {
        needs_retrieval: true,
        segments: Vec::new(),
        combine_answer: None,
        terminated_by,
    }
}

/// Truncates `text` to at most `max_words` whitespace-separated words.
fn apply_word_ceiling(text: String, max_words: usize) -> String {
    match text.split_whitespace().nth(max_words) {
        None => text,
        Some(_) => {
            warn!("generation exceeded {max_words} words, truncating");
            // cut right before the first word past the ceiling
            let mut seen = 0;
            let mut in_word = false;
            for (i, c) in text.char_indices() {
                if c.is_whitespace() {
                    in_word = false;
                } else if !in_word {
                    in_word = true;
                    if seen == max_words {
                        return text[..i].trim_end().to_string();
                    }
                    seen += 1;
                }
            }
            text
        }
    }
}

impl Run<'_, '_> {
    fn config(&self) -> &RunConfig {
        &self.engine.config
    }

    fn history(&self) -> Vec<HistoryTurn> {
        self.trace
            .segments
            .iter()
            .map(|s| HistoryTurn {
                plan: s.plan.clone(),
                answer: s.answer.clone(),
            })
            .collect()
    }

    fn call(&mut self, mode: LmMode, context: Vec<ContextPart>) -> Result<String, RunError> {
        let (cap, stop) = match mode {
            LmMode::Plan => {
                self.stats.plan_calls += 1;
                (self.config().plan_token_cap, vec![MarkerKind::PlanClose, MarkerKind::Eos])
            }
            LmMode::Answer => {
                self.stats.answer_calls += 1;
                (self.config().answer_token_cap, vec![MarkerKind::AnswerClose, MarkerKind::Eos])
            }
        };
        let request = LmRequest {
            mode,
            context,
            max_new_tokens: cap,
            stop: stop.into_iter().map(|m| m.literal().to_string()).collect(),
            temperature: 0.0,
        };
        let response = self.backend.generate(&request)?;
        if response.finish_reason == FinishReason::Error {
            return Err(BackendError::from(FailureCause::Reported(response.text)).into());
        }
        Ok(apply_word_ceiling(response.text, cap * RunConfig::WORD_CEILING_FACTOR))
    }

    fn plan(&mut self) -> Result<PlanOutput, RunError> {
        let mut context = vec![ContextPart::UserInput(self.query.to_string())];
        if !self.trace.segments.is_empty() {
            context.push(ContextPart::History(self.history()));
        }
        let text = self.call(LmMode::Plan, context)?;
        parse_plan_output(&text).map_err(|error| RunError::MalformedGeneration {
            mode: LmMode::Plan,
            error,
        })
    }

    /// Outer error: the call failed. Inner error: the output broke the grammar.
    fn answer(
        &mut self,
        context: Vec<ContextPart>,
    ) -> Result<Result<AnswerOutput, MalformedAnswer>, RunError> {
        let text = self.call(LmMode::Answer, context)?;
        Ok(parse_answer_output(&text))
    }

    fn retrieve(&mut self) -> Result<Vec<Passage>, RunError> {
        if self.config().evidence_mode == EvidenceMode::Disabled {
            return Ok(Vec::new());
        }
        let retriever = self
            .engine
            .retriever
            .expect("engine construction checks the retriever");
        self.stats.retrievals += 1;
        Ok(retriever.retrieve(self.query, self.config().retrieval_k)?)
    }

    fn combine(&mut self) -> Result<(), RunError> {
        let context = vec![
            ContextPart::UserInput(self.query.to_string()),
            ContextPart::History(self.history()),
            ContextPart::Plan(MarkerKind::Combine.literal().to_string()),
        ];
        match self.answer(context)? {
            Ok(out) => {
                self.trace.combine_answer = Some(out.answer);
                self.trace.terminated_by = Some(Termination::Eos);
                Ok(())
            }
            Err(bad) => {
                if !bad.salvaged.is_empty() {
                    self.trace.combine_answer = Some(bad.salvaged);
                }
                Err(malformed_answer(bad.error))
            }
        }
    }

    fn drive(&mut self) -> Result<(), RunError> {
        let mut plan = match self.plan()? {
            PlanOutput::Plan(p) => p,
            PlanOutput::NoExtraInfo => {
                let out = self.answer(vec![ContextPart::UserInput(self.query.to_string())])?;
                return match out {
                    Ok(out) => {
                        self.trace = GenerationTrace::no_extra_info(out.answer);
                        self.trace.terminated_by = Some(Termination::Eos);
                        Ok(())
                    }
                    Err(bad) => {
                        self.trace = GenerationTrace::no_extra_info(bad.salvaged);
                        Err(malformed_answer(bad.error))
                    }
                };
            }
            other => {
                return Err(RunError::MalformedGeneration {
                    mode: LmMode::Plan,
                    error: GrammarError::OrderViolation {
                        found: format!("{other:?}"),
                        offset: 0,
                        expected: "a first plan",
                    },
                })
            }
        };

        let passages = self.retrieve()?;
        let mut seen_plans = HashSet::new();
        loop {
            seen_plans.insert(plan.clone());
            let mut context = vec![ContextPart::UserInput(self.query.to_string())];
            let mut fine_paragraph = None;
            if self.config().evidence_mode != EvidenceMode::Disabled {
                self.stats.evidence_selections += 1;
                let cfg = self.config();
                let evidence = select_evidence(
                    &plan,
                    &passages,
                    self.engine.scorer,
                    cfg.evidence_k,
                    cfg.evidence_mode,
                )?;
                if !evidence.is_empty() {
                    let text = evidence.text();
                    context.push(ContextPart::Evidence(text.clone()));
                    fine_paragraph = Some(text);
                }
            }
            if !self.trace.segments.is_empty() {
                context.push(ContextPart::History(self.history()));
            }
            context.push(ContextPart::Plan(plan.clone()));

            let out = self.answer(context);
            let mut segment = Segment {
                fine_paragraph,
                ..Segment::new(plan.clone(), "")
            };
            let out = match out {
                Ok(Ok(out)) => out,
                Ok(Err(bad)) => {
                    // keep what was grammatical before the break
                    segment.answer = bad.salvaged;
                    self.trace.segments.push(segment);
                    return Err(malformed_answer(bad.error));
                }
                Err(e) => return Err(e),
            };
            segment.answer = out.answer.clone();
            self.trace.segments.push(segment);

            if out.combine && self.combine_enabled {
                return self.combine();
            }
            if out.eos {
                self.trace.terminated_by = Some(Termination::Eos);
                return Ok(());
            }
            if self.trace.segments.len() >= self.max_iterations {
                self.trace.terminated_by = Some(Termination::IterationCap);
                return Ok(());
            }
            plan = match self.plan()? {
                PlanOutput::Plan(p) => p,
                PlanOutput::Eos => {
                    self.trace.terminated_by = Some(Termination::Eos);
                    return Ok(());
                }
                PlanOutput::Combine if self.combine_enabled => return self.combine(),
                PlanOutput::Combine => {
                    debug!("[Combine] outside multi-hop mode, ending run");
                    self.trace.terminated_by = Some(Termination::Eos);
                    return Ok(());
                }
                PlanOutput::NoExtraInfo => {
                    return Err(RunError::MalformedGeneration {
                        mode: LmMode::Plan,
                        error: GrammarError::OrderViolation {
                            found: MarkerKind::NoExtraInfo.literal().to_string(),
                            offset: 0,
                            expected: "a plan after the first segment",
                        },
                    })
                }
            };
            if self.config().stop_on_plan_repeat && seen_plans.contains(&plan) {
                debug!("plan {plan:?} repeated, stopping");
                self.trace.terminated_by = Some(Termination::PlanRepeat);
                return Ok(());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockLmBackend, ScriptEntry};
    use crate::retrieval::{Document, LexicalIndex, LexicalScorer};

    fn index() -> LexicalIndex {
        LexicalIndex::build(vec![
            Document {
                doc_id: "d1".into(),
                title: None,
                body: "Paris is the capital of France. It is large.".into(),
            },
            Document {
                doc_id: "d2".into(),
                title: None,
                body: "Berlin is the capital of Germany.".into(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn word_ceiling() {
        assert_eq!(apply_word_ceiling("a b  c d".into(), 2), "a b");
        assert_eq!(apply_word_ceiling("a b".into(), 2), "a b");
        assert_eq!(apply_word_ceiling("  a\nb c".into(), 1), "  a");
    }

    #[test]
    fn engine_rejects_zero_caps_and_missing_retriever() {
        let cfg = RunConfig {
            max_iterations: 0,
            ..RunConfig::default()
        };
        assert!(matches!(
            Engine::new(None, &LexicalScorer, cfg),
            Err(ConfigError::ZeroCap("max_iterations"))
        ));
        assert!(matches!(
            Engine::new(None, &LexicalScorer, RunConfig::default()),
            Err(ConfigError::MissingRetriever(EvidenceMode::Selected))
        ));
        let off = RunConfig {
            evidence_mode: EvidenceMode::Disabled,
            ..RunConfig::default()
        };
        assert!(Engine::new(None, &LexicalScorer, off).is_ok());
    }

    #[test]
    fn requests_carry_caps_and_stops() {
        let idx = index();
        let engine = Engine::new(Some(&idx), &LexicalScorer, RunConfig::default()).unwrap();
        let mock = MockLmBackend::new(vec![
            ScriptEntry::plan("capital of France"),
            ScriptEntry::answer("Paris.<EOS>"),
        ]);
        let out = engine.run_query("What is the capital of France?", &mock);
        assert!(out.error.is_none());
        let reqs = mock.requests();
        assert_eq!(reqs[0].max_new_tokens, 30);
        assert!(reqs[0].stop.contains(&"<plan_end>".to_string()));
        assert_eq!(reqs[1].max_new_tokens, 100);
        assert!(reqs[1].stop.contains(&"<answer_end>".to_string()));
        assert!(reqs[1].stop.contains(&"<EOS>".to_string()));
        assert_eq!(reqs[1].temperature, 0.0);
        assert_eq!(reqs[1].plan(), Some("capital of France"));
        assert!(reqs[1].evidence().unwrap().contains("Paris is the capital of France."));
        assert_eq!(out.trace.terminated_by, Some(Termination::Eos));
    }

    #[test]
    fn short_task_runs_one_cycle() {
        let idx = index();
        let engine = Engine::new(Some(&idx), &LexicalScorer, RunConfig::default()).unwrap();
        let mock = MockLmBackend::new(vec![ScriptEntry::plan("France capital"), ScriptEntry::answer("Paris")]);
        let out = engine.run_task(QueryTask::Short, "capital of France?", &mock);
        assert_eq!(out.trace.segments.len(), 1);
        assert_eq!(out.stats.plan_calls, 1);
        assert_eq!(out.trace.terminated_by, Some(Termination::IterationCap));
    }

    #[test]
    fn backend_failure_mid_run_keeps_partial_trace() {
        let idx = index();
        let engine = Engine::new(Some(&idx), &LexicalScorer, RunConfig::default()).unwrap();
        let mock = MockLmBackend::new(vec![ScriptEntry::plan("France"), ScriptEntry::answer("Paris")]);
        let out = engine.run_query("q", &mock);
        assert_eq!(out.trace.segments.len(), 1);
        assert_eq!(out.trace.segments[0].answer, "Paris");
        assert!(matches!(out.error, Some(RunError::Backend(BackendError::ScriptExhausted { .. }))));
        assert_eq!(out.trace.terminated_by, Some(Termination::Aborted));
    }

    #[test]
    fn malformed_answer_salvages_prefix_and_stops() {
        let idx = index();
        let engine = Engine::new(Some(&idx), &LexicalScorer, RunConfig::default()).unwrap();
        let mock = MockLmBackend::new(vec![
            ScriptEntry::plan("France"),
            ScriptEntry::answer("Paris is the capital<paragraph>oops"),
            ScriptEntry::plan("never requested"),
        ]);
        let out = engine.run_query("q", &mock);
        assert_eq!(out.trace.segments[0].answer, "Paris is the capital");
        assert!(matches!(
            out.error,
            Some(RunError::MalformedGeneration { mode: LmMode::Answer, .. })
        ));
        assert_eq!(mock.consumed(), 2);
    }

    #[test]
    fn disabled_evidence_skips_retrieval() {
        let cfg = RunConfig {
            evidence_mode: EvidenceMode::Disabled,
            ..RunConfig::default()
        };
        let engine = Engine::new(None, &LexicalScorer, cfg).unwrap();
        let mock = MockLmBackend::new(vec![ScriptEntry::plan("p"), ScriptEntry::answer("a<EOS>")]);
        let out = engine.run_query("q", &mock);
        assert_eq!(out.stats.retrievals, 0);
        assert_eq!(out.stats.evidence_selections, 0);
        assert_eq!(out.trace.segments[0].fine_paragraph, None);
        assert_eq!(mock.requests()[1].evidence(), None);
    }

    #[test]
    fn combine_in_plain_run_is_not_a_summary_call() {
        let idx = index();
        let engine = Engine::new(Some(&idx), &LexicalScorer, RunConfig::default()).unwrap();
        let mock = MockLmBackend::new(vec![
            ScriptEntry::plan("p1"),
            ScriptEntry::answer("a1[Combine]"),
            ScriptEntry::plan("<EOS>"),
        ]);
        let out = engine.run_query("q", &mock);
        assert_eq!(out.trace.combine_answer, None);
        assert_eq!(out.stats.answer_calls, 1);
        assert_eq!(out.trace.terminated_by, Some(Termination::Eos));
    }
}
