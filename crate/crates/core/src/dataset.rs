//! Construction of plan/evidence-annotated training records.
//!
//! A source example (question, answer segments, supporting documents) is
//! annotated by an external model: one plan per answer segment and a set of
//! cited evidence sentences per segment. The annotations are then assembled
//! into a markup target with character spans marking the plan and answer
//! payloads that carry loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AnnotationClient, AnnotationRequest, AnnotationTask, BackendError};
use crate::grammar::{extract_intermediate_plans, parse_trace, serialize_trace, GrammarError, MarkerKind};
use crate::numeric::{MaskedBatch, TaskKind};
use crate::prompt::fill;
use crate::retrieval::{split_sentences, Document, Sentence};

pub const SHORT_FORM_PLAN_TEMPLATE: &str = include_str!("../templates/annotation/short_form_plan.txt");
pub const ASQA_CITE_TEMPLATE: &str = include_str!("../templates/annotation/asqa_cite.txt");
pub const ASQA_SUMMARIZE_TEMPLATE: &str = include_str!("../templates/annotation/asqa_summarize.txt");
pub const SHAREGPT_PLAN_TEMPLATE: &str = include_str!("../templates/annotation/sharegpt_plan.txt");
pub const EVIDENCE_TEMPLATE: &str = include_str!("../templates/annotation/evidence.txt");
pub const HOTPOTQA_PLAN_TEMPLATE: &str = include_str!("../templates/annotation/hotpotqa_plan.txt");

/// Placeholder in ShareGPT inputs marking where a plan belongs.
const PLAN_SLOT: &str = "[Plan]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ShortForm,
    Asqa,
    ShareGpt,
    HotpotQa,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceExample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub dataset_kind: DatasetKind,
    pub question: String,
    /// For HotpotQA, a single entry holding the short answer.
    pub answer_segments: Vec<String>,
    #[serde(default)]
    pub documents: Vec<Document>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_subpairs: Option<Vec<QaPair>>,
    #[serde(default = "default_true")]
    pub needs_retrieval: bool,
}

fn default_true() -> bool {
    true
}

impl SourceExample {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.answer_segments.is_empty() {
            return Err(DatasetError::InvalidExample("no answer segments".into()));
        }
        if self.dataset_kind == DatasetKind::Asqa && self.qa_subpairs.is_none() {
            return Err(DatasetError::InvalidExample("ASQA example without qa_subpairs".into()));
        }
        Ok(())
    }

    /// Sentences of every document, numbered in document then sentence order.
    pub fn sentences(&self) -> Vec<Sentence> {
        self.documents
            .iter()
            .flat_map(|d| {
                split_sentences(&d.body)
                    .into_iter()
                    .enumerate()
                    .map(|(sentence_index, text)| Sentence {
                        doc_id: d.doc_id.clone(),
                        sentence_index,
                        text,
                    })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("invalid source example: {0}")]
    InvalidExample(String),
    #[error("{task:?} annotation failed: {detail}")]
    AnnotationFailure { task: AnnotationTask, detail: String },
    #[error("cited index {index} is out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("assembled record is not valid markup: {0}")]
    InvariantViolation(#[from] GrammarError),
}

impl DatasetError {
    /// Failures that stop the whole build rather than one record.
    pub fn is_unavailable(&self) -> bool {
        matches!(self, DatasetError::Backend(BackendError::Unavailable(_)))
    }
}

fn failure(task: AnnotationTask, detail: impl Into<String>) -> DatasetError {
    DatasetError::AnnotationFailure {
        task,
        detail: detail.into(),
    }
}

fn ask(
    client: &dyn AnnotationClient,
    task: AnnotationTask,
    template: &str,
    slots: &[(&str, &str)],
    key: String,
) -> Result<String, DatasetError> {
    let prompt = fill(template, |name| {
        slots.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    });
    Ok(client.complete(&AnnotationRequest { task, prompt, key })?)
}

fn numbered<'a>(items: impl IntoIterator<Item = &'a str>) -> String {
    items
        .into_iter()
        .enumerate()
        .map(|(i, s)| format!("[{i}] {s}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Every `[digits]` citation in `text`, in order of appearance.
pub fn parse_citations(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let digits = after.len() - after.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits > 0 && after[digits..].starts_with(']') {
            if let Ok(i) = after[..digits].parse() {
                out.push(i);
            }
            rest = &after[digits + 1..];
        } else {
            rest = after;
        }
    }
    out
}

fn strip_citations(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let digits = after.len() - after.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits > 0 && after[digits..].starts_with(']') {
            rest = &after[digits + 1..];
        } else {
            out.push('[');
            rest = after;
        }
    }
    out.push_str(rest);
    out
}

/// Sorted, duplicate-free citations, all below `len`.
fn checked_citations(
    task: AnnotationTask,
    response: &str,
    len: usize,
) -> Result<Vec<usize>, DatasetError> {
    let mut cited = parse_citations(response);
    if cited.is_empty() {
        return Err(failure(task, format!("no citations in {response:?}")));
    }
    cited.sort_unstable();
    cited.dedup();
    if let Some(&index) = cited.iter().find(|&&i| i >= len) {
        return Err(DatasetError::IndexOutOfRange { index, len });
    }
    Ok(cited)
}

fn first_plan(task: AnnotationTask, response: &str) -> Result<String, DatasetError> {
    extract_intermediate_plans(response)
        .into_iter()
        .next()
        .filter(|p| !p.is_empty())
        .ok_or_else(|| failure(task, format!("no plan tag in {response:?}")))
}

/// Plan for a short-form question. The scripted key is the question.
pub fn plan_short_form(question: &str, client: &dyn AnnotationClient) -> Result<String, DatasetError> {
    let task = AnnotationTask::ShortFormPlan;
    let response = ask(
        client,
        task,
        SHORT_FORM_PLAN_TEMPLATE,
        &[("question", question)],
        question.to_string(),
    )?;
    first_plan(task, &response)
}

/// Plan for one ASQA segment: cite the sub-questions the segment answers,
/// then summarize them into one question.
///
/// Scripted keys: the segment for the citation call; the numbered cited
/// questions (one per line) for the summary call.
pub fn plan_asqa(
    segment: &str,
    pairs: &[QaPair],
    client: &dyn AnnotationClient,
) -> Result<String, DatasetError> {
    let qa = numbered(
        pairs
            .iter()
            .map(|p| format!("{} {}", p.question, p.answer))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str),
    );
    let response = ask(
        client,
        AnnotationTask::AsqaCite,
        ASQA_CITE_TEMPLATE,
        &[("qa_pairs", &qa), ("sentence", segment)],
        segment.to_string(),
    )?;
    let cited = checked_citations(AnnotationTask::AsqaCite, &response, pairs.len())?;
    let questions = numbered(cited.iter().map(|&i| pairs[i].question.as_str()));
    let task = AnnotationTask::AsqaSummarize;
    let summary = ask(
        client,
        task,
        ASQA_SUMMARIZE_TEMPLATE,
        &[("questions", &questions)],
        questions.clone(),
    )?;
    // the summary prompt asks for a question, not a tagged plan
    match extract_intermediate_plans(&summary).into_iter().next() {
        Some(p) if !p.is_empty() => Ok(p),
        _ if !summary.trim().is_empty() => Ok(summary.trim().to_string()),
        _ => Err(failure(task, "empty summary")),
    }
}

/// The ShareGPT annotation input: every segment preceded by a plan slot.
pub fn sharegpt_input(segments: &[String]) -> String {
    segments
        .iter()
        .map(|s| format!("{PLAN_SLOT} {s}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One plan per segment from a single call. The scripted key is
/// [`sharegpt_input`].
pub fn plan_sharegpt(
    segments: &[String],
    client: &dyn AnnotationClient,
) -> Result<Vec<String>, DatasetError> {
    let task = AnnotationTask::ShareGptPlan;
    let input = sharegpt_input(segments);
    let response = ask(client, task, SHAREGPT_PLAN_TEMPLATE, &[("segments", &input)], input.clone())?;
    let plans = extract_intermediate_plans(&response);
    if plans.len() != segments.len() {
        return Err(failure(
            task,
            format!("{} plans for {} segments", plans.len(), segments.len()),
        ));
    }
    if plans.iter().any(String::is_empty) {
        return Err(failure(task, "empty plan tag"));
    }
    Ok(plans)
}

/// Scripted key for an evidence request: plan and answer on two lines.
pub fn evidence_key(plan: &str, answer: &str) -> String {
    format!("{plan}\n{answer}")
}

/// Indices of the sentences cited as evidence for one answer segment.
///
/// The question line carries the plan as an inline tag so the annotator
/// sees which topic the segment covers.
pub fn annotate_evidence(
    question: &str,
    plan: &str,
    answer: &str,
    sentences: &[Sentence],
    client: &dyn AnnotationClient,
) -> Result<Vec<usize>, DatasetError> {
    let task = AnnotationTask::Evidence;
    if sentences.is_empty() {
        return Err(failure(task, "no candidate sentences"));
    }
    let question_line = format!("{question} [Plan: {plan}]");
    let evidence = numbered(sentences.iter().map(|s| s.text.as_str()));
    let response = ask(
        client,
        task,
        EVIDENCE_TEMPLATE,
        &[("question", &question_line), ("answer", answer), ("evidence", &evidence)],
        evidence_key(plan, answer),
    )?;
    checked_citations(task, &response, sentences.len())
}

/// One annotated answer segment; `evidence` indexes [`SourceExample::sentences`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSegment {
    pub plan: String,
    pub answer: String,
    pub evidence: Vec<usize>,
}

/// A parsed multi-hop annotation: segments with their single citation, or
/// the reason a segment is unusable.
pub type HopSegments = Vec<Result<AnnotatedSegment, (String, DatasetError)>>;

/// Expands a short multi-hop answer into planned, cited segments. The
/// scripted key is the question.
pub fn annotate_hotpotqa(
    question: &str,
    short_answer: &str,
    sentences: &[Sentence],
    client: &dyn AnnotationClient,
) -> Result<HopSegments, DatasetError> {
    let task = AnnotationTask::HotpotQaPlan;
    let evidence = numbered(sentences.iter().map(|s| s.text.as_str()));
    let response = ask(
        client,
        task,
        HOTPOTQA_PLAN_TEMPLATE,
        &[("question", question), ("answer", short_answer), ("evidence", &evidence)],
        question.to_string(),
    )?;
    let hops = parse_hop_output(&response);
    if hops.is_empty() {
        return Err(failure(task, format!("no plan tag in {response:?}")));
    }
    Ok(hops
        .into_iter()
        .map(|(plan, text)| {
            let answer = strip_citations(&text).trim().to_string();
            let cited = parse_citations(&text);
            let outcome = match cited.first() {
                None => Err(failure(task, "segment cites no evidence")),
                Some(&index) if index >= sentences.len() => Err(DatasetError::IndexOutOfRange {
                    index,
                    len: sentences.len(),
                }),
                Some(_) if plan.is_empty() || answer.is_empty() => {
                    Err(failure(task, "empty plan or segment"))
                }
                Some(&index) => Ok(AnnotatedSegment {
                    plan: plan.clone(),
                    answer: answer.clone(),
                    evidence: vec![index],
                }),
            };
            outcome.map_err(|e| (answer, e))
        })
        .collect())
}

/// Splits `[Plan: p]text[Plan: q]text...` into (plan, text) pairs. Text
/// before the first tag is discarded.
fn parse_hop_output(text: &str) -> Vec<(String, String)> {
    const OPEN: &str = "[Plan:";
    let mut out = Vec::new();
    let mut rest = match text.find(OPEN) {
        Some(i) => &text[i..],
        None => return out,
    };
    while let Some(after) = rest.strip_prefix(OPEN) {
        let Some(close) = after.find(']') else { break };
        let plan = after[..close].trim().to_string();
        let body = &after[close + 1..];
        let end = body.find(OPEN).unwrap_or(body.len());
        out.push((plan, body[..end].to_string()));
        rest = &body[end..];
    }
    out
}

/// A markup target with the character spans that carry plan and answer loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub input_text: String,
    pub target_text: String,
    /// Half-open `[start, end)` character offsets into `target_text`.
    pub plan_mask_spans: Vec<(usize, usize)>,
    pub answer_mask_spans: Vec<(usize, usize)>,
}

/// Appends text while tracking the output length in characters.
struct SpanWriter {
    text: String,
    chars: usize,
}

impl SpanWriter {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.chars += s.chars().count();
    }

    fn wrapped(&mut self, open: MarkerKind, payload: &str) -> (usize, usize) {
        self.push(open.literal());
        let start = self.chars;
        self.push(payload);
        let span = (start, self.chars);
        self.push(open.closer().map(MarkerKind::literal).unwrap_or_default());
        span
    }
}

/// Renders annotated segments as a training record.
///
/// The coarse paragraph of a segment is the full body of every document
/// that contributed a cited sentence; the fine paragraph is the cited
/// sentences joined by a space. Examples that need no retrieval produce a
/// bare answer behind the no-extra-info marker, and HotpotQA examples end
/// with a combine step whose answer is the short answer.
pub fn assemble_record(
    example: &SourceExample,
    segments: &[AnnotatedSegment],
) -> Result<TrainingRecord, DatasetError> {
    example.validate()?;
    let mut w = SpanWriter {
        text: String::new(),
        chars: 0,
    };
    let mut plan_mask_spans = Vec::new();
    let mut answer_mask_spans = Vec::new();
    if !example.needs_retrieval {
        w.push(MarkerKind::NoExtraInfo.literal());
        let start = w.chars;
        w.push(&example.answer_segments.join(" "));
        answer_mask_spans.push((start, w.chars));
    } else {
        if segments.is_empty() {
            return Err(GrammarError::InvariantViolation("record has no segments".into()).into());
        }
        let sentences = example.sentences();
        for seg in segments {
            if let Some(&index) = seg.evidence.iter().find(|&&i| i >= sentences.len()) {
                return Err(DatasetError::IndexOutOfRange {
                    index,
                    len: sentences.len(),
                });
            }
            let fine: Vec<&str> = seg.evidence.iter().map(|&i| sentences[i].text.as_str()).collect();
            let coarse: Vec<&str> = example
                .documents
                .iter()
                .filter(|d| seg.evidence.iter().any(|&i| sentences[i].doc_id == d.doc_id))
                .map(|d| d.body.as_str())
                .collect();
            plan_mask_spans.push(w.wrapped(MarkerKind::PlanOpen, &seg.plan));
            if !coarse.is_empty() {
                w.wrapped(MarkerKind::ParagraphOpen, &coarse.join(" "));
                w.wrapped(MarkerKind::FParagraphOpen, &fine.join(" "));
            }
            answer_mask_spans.push(w.wrapped(MarkerKind::AnswerOpen, &seg.answer));
        }
        if example.dataset_kind == DatasetKind::HotpotQa {
            w.push(MarkerKind::Combine.literal());
            answer_mask_spans.push(w.wrapped(MarkerKind::AnswerOpen, example.answer_segments[0].trim()));
        }
    }
    // the writer mirrors the serializer; a payload containing markup would
    // break the round trip
    let reparsed = serialize_trace(&parse_trace(&w.text)?)?;
    if reparsed != w.text {
        return Err(GrammarError::InvariantViolation("record does not round-trip".into()).into());
    }
    Ok(TrainingRecord {
        input_text: example.question.clone(),
        target_text: w.text,
        plan_mask_spans,
        answer_mask_spans,
    })
}

/// Half-open character ranges.
pub type Spans = Vec<(usize, usize)>;

/// Character spans of plan and answer payloads, re-derived from the markup.
pub fn derive_mask_spans(target: &str) -> (Spans, Spans) {
    let char_at = |byte: usize| target[..byte].chars().count();
    let payloads = |open: MarkerKind| {
        let open_lit = open.literal();
        let close_lit = open.closer().map(MarkerKind::literal).unwrap_or_default();
        let mut spans = Vec::new();
        let mut from = 0;
        while let Some(i) = target[from..].find(open_lit) {
            let start = from + i + open_lit.len();
            let Some(len) = target[start..].find(close_lit) else { break };
            spans.push((char_at(start), char_at(start + len)));
            from = start + len + close_lit.len();
        }
        spans
    };
    let no_extra = MarkerKind::NoExtraInfo.literal();
    if let Some(rest) = target.strip_prefix(no_extra) {
        let body = rest.strip_suffix(MarkerKind::Eos.literal()).unwrap_or(rest);
        let start = char_at(no_extra.len());
        return (Vec::new(), vec![(start, start + body.chars().count())]);
    }
    (payloads(MarkerKind::PlanOpen), payloads(MarkerKind::AnswerOpen))
}

/// True iff the stored spans are in bounds, pairwise disjoint and exactly
/// the plan and answer payloads of the target.
pub fn verify_masks(record: &TrainingRecord) -> bool {
    let n = record.target_text.chars().count();
    let mut all: Vec<(usize, usize)> = record
        .plan_mask_spans
        .iter()
        .chain(&record.answer_mask_spans)
        .copied()
        .collect();
    if all.iter().any(|&(s, e)| s > e || e > n) {
        return false;
    }
    all.sort_unstable();
    if all.windows(2).any(|w| w[0].1 > w[1].0) {
        return false;
    }
    let (plans, answers) = derive_mask_spans(&record.target_text);
    plans == record.plan_mask_spans && answers == record.answer_mask_spans
}

/// Per-character loss masks over the target: (plan, answer).
pub fn char_masks(record: &TrainingRecord) -> (Vec<bool>, Vec<bool>) {
    let n = record.target_text.chars().count();
    let paint = |spans: &[(usize, usize)]| {
        let mut m = vec![false; n];
        for &(s, e) in spans {
            m[s.min(n)..e.min(n)].iter_mut().for_each(|x| *x = true);
        }
        m
    };
    (paint(&record.plan_mask_spans), paint(&record.answer_mask_spans))
}

/// Vocabulary of the character-level toy batch.
pub const CHAR_VOCAB: usize = 128;

/// A character-level batch over the target with uniform logits, masked to
/// the plan or answer spans. Its loss is `ln(CHAR_VOCAB)` per masked char.
pub fn char_level_batch(record: &TrainingRecord, task: TaskKind) -> MaskedBatch {
    let (plan, answer) = char_masks(record);
    let mask = match task {
        TaskKind::Plan => plan,
        TaskKind::Ans => answer,
    };
    let targets: Vec<usize> = record
        .target_text
        .chars()
        .map(|c| c as usize % CHAR_VOCAB)
        .collect();
    let logits = nalgebra::DMatrix::zeros(targets.len(), CHAR_VOCAB);
    MaskedBatch::new(logits, targets, mask).expect("shapes agree by construction")
}

/// A segment left out of a record, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSegment {
    pub index: usize,
    pub answer: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildOutcome {
    pub record: TrainingRecord,
    pub dropped: Vec<DroppedSegment>,
}

/// Annotates and assembles one example.
///
/// Segments whose annotation fails are dropped and reported; the example
/// fails only if the backend is unreachable or no segment survives.
pub fn build_record(
    example: &SourceExample,
    client: &dyn AnnotationClient,
) -> Result<BuildOutcome, DatasetError> {
    example.validate()?;
    if !example.needs_retrieval {
        return Ok(BuildOutcome {
            record: assemble_record(example, &[])?,
            dropped: Vec::new(),
        });
    }
    let sentences = example.sentences();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut drop = |index: usize, answer: &str, err: DatasetError| -> Result<(), DatasetError> {
        if err.is_unavailable() {
            return Err(err);
        }
        log::warn!("dropping segment {index}: {err}");
        dropped.push(DroppedSegment {
            index,
            answer: answer.to_string(),
            reason: err.to_string(),
        });
        Ok(())
    };

    if example.dataset_kind == DatasetKind::HotpotQa {
        let hops = annotate_hotpotqa(&example.question, &example.answer_segments[0], &sentences, client)?;
        for (index, hop) in hops.into_iter().enumerate() {
            match hop {
                Ok(seg) => kept.push(seg),
                Err((answer, err)) => drop(index, &answer, err)?,
            }
        }
    } else {
        let plans: Vec<Result<String, DatasetError>> = match example.dataset_kind {
            DatasetKind::ShortForm => {
                let plan = plan_short_form(&example.question, client);
                example.answer_segments.iter().map(|_| plan.clone()).collect()
            }
            DatasetKind::Asqa => {
                let pairs = example.qa_subpairs.as_deref().unwrap_or_default();
                example
                    .answer_segments
                    .iter()
                    .map(|s| plan_asqa(s, pairs, client))
                    .collect()
            }
            DatasetKind::ShareGpt => match plan_sharegpt(&example.answer_segments, client) {
                Ok(plans) => plans.into_iter().map(Ok).collect(),
                Err(e) => example.answer_segments.iter().map(|_| Err(e.clone())).collect(),
            },
            DatasetKind::HotpotQa => unreachable!("handled above"),
        };
        for (index, (answer, plan)) in example.answer_segments.iter().zip(plans).enumerate() {
            let annotated = plan.and_then(|plan| {
                let evidence = annotate_evidence(&example.question, &plan, answer, &sentences, client)?;
                Ok(AnnotatedSegment {
                    plan,
                    answer: answer.clone(),
                    evidence,
                })
            });
            match annotated {
                Ok(seg) => kept.push(seg),
                Err(err) => drop(index, answer, err)?,
            }
        }
    }
    if kept.is_empty() {
        return Err(failure(
            AnnotationTask::Evidence,
            format!("all {} segments were dropped", dropped.len()),
        ));
    }
    Ok(BuildOutcome {
        record: assemble_record(example, &kept)?,
        dropped,
    })
}

/// One line of the record output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordLine {
    pub input: String,
    pub target: String,
    pub plan_spans: Vec<(usize, usize)>,
    pub answer_spans: Vec<(usize, usize)>,
    pub meta: RecordMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub kind: DatasetKind,
    pub needs_retrieval: bool,
    #[serde(default)]
    pub dropped_segments: Vec<DroppedSegment>,
}

impl RecordLine {
    pub fn new(example: &SourceExample, outcome: BuildOutcome) -> Self {
        RecordLine {
            input: outcome.record.input_text,
            target: outcome.record.target_text,
            plan_spans: outcome.record.plan_mask_spans,
            answer_spans: outcome.record.answer_mask_spans,
            meta: RecordMeta {
                id: example.id.clone(),
                kind: example.dataset_kind,
                needs_retrieval: example.needs_retrieval,
                dropped_segments: outcome.dropped,
            },
        }
    }

    pub fn record(&self) -> TrainingRecord {
        TrainingRecord {
            input_text: self.input.clone(),
            target_text: self.target.clone(),
            plan_mask_spans: self.plan_spans.clone(),
            answer_mask_spans: self.answer_spans.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub records: usize,
    /// `None` for an empty dataset.
    pub avg_plans_per_record: Option<f64>,
    /// Percentage of records with at least one plan.
    pub pct_with_plan: Option<f64>,
}

pub fn dataset_stats(records: &[TrainingRecord]) -> DatasetStats {
    let n = records.len();
    let plans: usize = records.iter().map(|r| r.plan_mask_spans.len()).sum();
    let with_plan = records.iter().filter(|r| !r.plan_mask_spans.is_empty()).count();
    DatasetStats {
        records: n,
        avg_plans_per_record: (n > 0).then(|| plans as f64 / n as f64),
        pct_with_plan: (n > 0).then(|| 100.0 * with_plan as f64 / n as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{AnnotationScriptEntry, ScriptedAnnotationClient};
    use crate::numeric::masked_nll;

    fn entry(task: AnnotationTask, key: &str, response: &str) -> AnnotationScriptEntry {
        AnnotationScriptEntry {
            task,
            key: key.into(),
            response: response.into(),
        }
    }

    fn doc(id: &str, body: &str) -> Document {
        Document {
            doc_id: id.into(),
            title: None,
            body: body.into(),
        }
    }

    fn haier_sentences() -> Vec<Sentence> {
        [
            "Haier Pakistan is a consumer electronics and home appliances company in Pakistan.",
            "Established in 2000, it is a subsidiary of the Chinese multinational group Haier.",
            "It is one of the largest companies in Pakistan's home appliances market, in terms of sales and revenues generated.",
        ]
        .iter()
        .enumerate()
        .map(|(i, t)| Sentence {
            doc_id: "haier".into(),
            sentence_index: i,
            text: t.to_string(),
        })
        .collect()
    }

    #[test]
    fn short_form_plan_from_tagged_output() {
        let q = "which company Javed Afridi is best known as CEO?";
        let client = ScriptedAnnotationClient::new([entry(
            AnnotationTask::ShortFormPlan,
            q,
            "[Plan: Javed Afridi best known company].",
        )]);
        assert_eq!(plan_short_form(q, &client).unwrap(), "Javed Afridi best known company");
    }

    #[test]
    fn untagged_plan_output_is_a_failure() {
        let client = ScriptedAnnotationClient::new([entry(AnnotationTask::ShortFormPlan, "q", "no tags here")]);
        assert!(matches!(
            plan_short_form("q", &client),
            Err(DatasetError::AnnotationFailure { .. })
        ));
    }

    #[test]
    fn evidence_citations() {
        let s = haier_sentences();
        let key = evidence_key("Haier Pakistan establish", "2000.");
        let run = |resp: &str| {
            let c = ScriptedAnnotationClient::new([entry(AnnotationTask::Evidence, &key, resp)]);
            annotate_evidence("When was Haier Pakistan established?", "Haier Pakistan establish", "2000.", &s, &c)
        };
        assert_eq!(run("[1]").unwrap(), [1]);
        assert_eq!(run("[2][0][1][0]").unwrap(), [0, 1, 2]);
        assert_eq!(run("[7]"), Err(DatasetError::IndexOutOfRange { index: 7, len: 3 }));
        assert!(matches!(run("none"), Err(DatasetError::AnnotationFailure { .. })));
    }

    #[test]
    fn evidence_prompt_numbers_sentences_and_carries_plan() {
        struct Capture(std::sync::Mutex<String>);
        impl AnnotationClient for Capture {
            fn complete(&self, r: &AnnotationRequest) -> Result<String, BackendError> {
                *self.0.lock().unwrap() = r.prompt.clone();
                Ok("[0]".into())
            }
        }
        let c = Capture(Default::default());
        annotate_evidence("Q?", "P", "A.", &haier_sentences(), &c).unwrap();
        let prompt = c.0.lock().unwrap().clone();
        assert!(prompt.ends_with(
            "Question: Q? [Plan: P]\nAnswer: A.\n[0] Haier Pakistan is a consumer electronics and home appliances company in Pakistan.\n\
             [1] Established in 2000, it is a subsidiary of the Chinese multinational group Haier.\n\
             [2] It is one of the largest companies in Pakistan's home appliances market, in terms of sales and revenues generated.\nOut:\n"
        ));
    }

    #[test]
    fn citation_parsing() {
        assert_eq!(parse_citations("a[1], b.[0] [x] [12]"), [1, 0, 12]);
        assert_eq!(strip_citations("Haier Pakistan[1], x [y]"), "Haier Pakistan, x [y]");
    }

    #[test]
    fn hop_output_parse() {
        let out = "[Plan: Javed Afridi best known company]Javed Afridi is best known as the CEO of  Haier Pakistan[1],[Plan: Haier Pakistan establish]which was established in 2000.[0]";
        let hops = parse_hop_output(out);
        assert_eq!(hops.len(), 2);
        assert_eq!(hops[1].0, "Haier Pakistan establish");
        assert_eq!(hops[1].1, "which was established in 2000.[0]");
    }

    #[test]
    fn no_extra_info_record() {
        let ex = SourceExample {
            id: None,
            dataset_kind: DatasetKind::ShortForm,
            question: "What is 2 + 2?".into(),
            answer_segments: vec!["4".into()],
            documents: vec![],
            qa_subpairs: None,
            needs_retrieval: false,
        };
        let client = ScriptedAnnotationClient::new([]);
        let rec = build_record(&ex, &client).unwrap().record;
        assert_eq!(rec.target_text, "<NOT_NEED_EXTRA_INFO>4");
        assert!(rec.plan_mask_spans.is_empty());
        assert_eq!(rec.answer_mask_spans, [(21, 22)]);
        assert!(verify_masks(&rec));
    }

    #[test]
    fn hotpot_record_ends_with_combine() {
        let ex = SourceExample {
            id: None,
            dataset_kind: DatasetKind::HotpotQa,
            question: "In what year was the company, for which Javed Afridi is best known as CEO, established?".into(),
            answer_segments: vec!["2000".into()],
            documents: vec![
                doc("a", "Established in 2000, Haier Pakistan is a subsidiary of the Chinese multinational group Haier."),
                doc("b", "Javed Afridi is best known as the CEO of Haier Pakistan and owner of MG Motors Pakistan."),
            ],
            qa_subpairs: None,
            needs_retrieval: true,
        };
        let client = ScriptedAnnotationClient::new([entry(
            AnnotationTask::HotpotQaPlan,
            &ex.question,
            "[Plan: Javed Afridi best known company]Javed Afridi is best known as the CEO of Haier Pakistan[1],[Plan: Haier Pakistan establish]which was established in 2000.[0]",
        )]);
        let rec = build_record(&ex, &client).unwrap().record;
        assert!(rec.target_text.ends_with("[Combine]<answer_start>2000<answer_end>"));
        assert!(rec.target_text.contains(
            "<fparagraph>Javed Afridi is best known as the CEO of Haier Pakistan and owner of MG Motors Pakistan.</fparagraph><answer_start>Javed Afridi is best known as the CEO of Haier Pakistan,<answer_end>"
        ));
        assert_eq!(rec.plan_mask_spans.len(), 2);
        assert_eq!(rec.answer_mask_spans.len(), 3);
        assert!(verify_masks(&rec));
    }

    #[test]
    fn failed_segments_are_dropped() {
        let ex = SourceExample {
            id: None,
            dataset_kind: DatasetKind::ShareGpt,
            question: "Tell me about Haier Pakistan.".into(),
            answer_segments: vec!["It makes appliances.".into(), "It was founded in 2000.".into()],
            documents: vec![doc("d", "Haier Pakistan makes appliances. It was established in 2000.")],
            qa_subpairs: None,
            needs_retrieval: true,
        };
        let input = sharegpt_input(&ex.answer_segments);
        assert_eq!(input, "[Plan] It makes appliances. [Plan] It was founded in 2000.");
        let client = ScriptedAnnotationClient::new([
            entry(AnnotationTask::ShareGptPlan, &input, "[Plan: products] It makes appliances. [Plan: founding] It was founded in 2000."),
            entry(AnnotationTask::Evidence, &evidence_key("products", "It makes appliances."), "none"),
            entry(AnnotationTask::Evidence, &evidence_key("founding", "It was founded in 2000."), "[1]"),
        ]);
        let out = build_record(&ex, &client).unwrap();
        assert_eq!(out.dropped.len(), 1);
        assert_eq!(out.dropped[0].index, 0);
        assert_eq!(
            out.record.target_text,
            "<plan_start>founding<plan_end><paragraph>Haier Pakistan makes appliances. It was established in 2000.</paragraph>\
             <fparagraph>It was established in 2000.</fparagraph><answer_start>It was founded in 2000.<answer_end>"
        );
    }

    #[test]
    fn shifted_span_fails_verification() {
        let ex = SourceExample {
            id: None,
            dataset_kind: DatasetKind::ShortForm,
            question: "q".into(),
            answer_segments: vec!["yes".into()],
            documents: vec![doc("d", "A fact.")],
            qa_subpairs: None,
            needs_retrieval: true,
        };
        let seg = AnnotatedSegment {
            plan: "p".into(),
            answer: "yes".into(),
            evidence: vec![0],
        };
        let mut rec = assemble_record(&ex, &[seg]).unwrap();
        assert!(verify_masks(&rec));
        rec.plan_mask_spans[0].1 += 1;
        assert!(!verify_masks(&rec));
    }

    #[test]
    fn char_batch_loss_counts_masked_chars() {
        let rec = TrainingRecord {
            input_text: "q".into(),
            target_text: "<plan_start>abc<plan_end><answer_start>de<answer_end>".into(),
            plan_mask_spans: vec![(12, 15)],
            answer_mask_spans: vec![(39, 41)],
        };
        assert!(verify_masks(&rec));
        let ln_v = (CHAR_VOCAB as f64).ln();
        let plan = masked_nll(&char_level_batch(&rec, TaskKind::Plan)).unwrap();
        let ans = masked_nll(&char_level_batch(&rec, TaskKind::Ans)).unwrap();
        assert!((plan - 3.0 * ln_v).abs() < 1e-12);
        assert!((ans - 2.0 * ln_v).abs() < 1e-12);
    }

    #[test]
    fn stats_over_records() {
        let mk = |plans: usize| TrainingRecord {
            input_text: String::new(),
            target_text: String::new(),
            plan_mask_spans: vec![(0, 0); plans],
            answer_mask_spans: vec![],
        };
        let s = dataset_stats(&[mk(0), mk(2), mk(4)]);
        assert_eq!(s.avg_plans_per_record, Some(2.0));
        assert!((s.pct_with_plan.unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(dataset_stats(&[]).avg_plans_per_record, None);
    }
}
