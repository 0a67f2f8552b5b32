//! Contracts shared by language-model, reranker and annotation backends,
//! plus the scripted in-process backends used for offline runs.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum FailureCause {
    #[error("timed out")]
    Timeout,
    #[error("http status {0}")]
    Status(u16),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("backend reported an error: {0}")]
    Reported(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(#[from] FailureCause),
    #[error("script exhausted after {consumed} responses")]
    ScriptExhausted { consumed: usize },
    #[error("script entry {index} is a {expected:?} response but a {requested:?} request arrived")]
    ModeMismatch {
        index: usize,
        expected: LmMode,
        requested: LmMode,
    },
    #[error("no scripted response for {0:?}")]
    NoScriptedResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmMode {
    Plan,
    Answer,
}

/// One completed plan/answer pair from earlier in the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub plan: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "part", content = "value")]
pub enum ContextPart {
    UserInput(String),
    Evidence(String),
    History(Vec<HistoryTurn>),
    Plan(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    pub mode: LmMode,
    pub context: Vec<ContextPart>,
    pub max_new_tokens: usize,
    pub stop: Vec<String>,
    pub temperature: f64,
}

impl LmRequest {
    pub fn part<T>(&self, pick: impl Fn(&ContextPart) -> Option<&T>) -> Option<&T>
    where
        T: ?Sized,
    {
        self.context.iter().find_map(pick)
    }

    pub fn user_input(&self) -> Option<&str> {
        self.part(|p| match p {
            ContextPart::UserInput(s) => Some(s.as_str()),
            _ => None,
        })
    }

    pub fn evidence(&self) -> Option<&str> {
        self.part(|p| match p {
            ContextPart::Evidence(s) => Some(s.as_str()),
            _ => None,
        })
    }

    pub fn plan(&self) -> Option<&str> {
        self.part(|p| match p {
            ContextPart::Plan(s) => Some(s.as_str()),
            _ => None,
        })
    }

    pub fn history(&self) -> &[HistoryTurn] {
        self.part(|p| match p {
            ContextPart::History(h) => Some(h.as_slice()),
            _ => None,
        })
        .unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmResponse {
    pub text: String,
    pub finish_reason: FinishReason,
}

pub trait LmBackend: Send + Sync {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, BackendError>;
}

impl<T: LmBackend + ?Sized> LmBackend for Arc<T> {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, BackendError> {
        (**self).generate(request)
    }
}

/// Scores candidate sentences against a plan; higher is more relevant.
pub trait SentenceScorer: Send + Sync {
    fn score(&self, plan: &str, sentences: &[&str]) -> Result<Vec<f64>, BackendError>;
}

/// Which annotation prompt a request renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationTask {
    ShortFormPlan,
    AsqaCite,
    AsqaSummarize,
    ShareGptPlan,
    HotpotQaPlan,
    Evidence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRequest {
    pub task: AnnotationTask,
    /// The rendered prompt sent over the wire.
    pub prompt: String,
    /// The variable slot content; scripted clients look responses up by it.
    pub key: String,
}

pub trait AnnotationClient: Send + Sync {
    fn complete(&self, request: &AnnotationRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub mode: LmMode,
    pub text: String,
}

impl ScriptEntry {
    pub fn plan(text: impl Into<String>) -> Self {
        ScriptEntry {
            mode: LmMode::Plan,
            text: text.into(),
        }
    }

    pub fn answer(text: impl Into<String>) -> Self {
        ScriptEntry {
            mode: LmMode::Answer,
            text: text.into(),
        }
    }
}

/// Replays canned responses in order and fails on a mode mismatch.
#[derive(Debug, Default)]
pub struct MockLmBackend {
    script: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
    requests: Mutex<Vec<LmRequest>>,
}

impl MockLmBackend {
    pub fn new(script: Vec<ScriptEntry>) -> Self {
        MockLmBackend {
            script,
            ..Default::default()
        }
    }

    pub fn consumed(&self) -> usize {
        *self.cursor.lock().unwrap()
    }

    /// Every request received, including ones that failed.
    pub fn requests(&self) -> Vec<LmRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl LmBackend for MockLmBackend {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, BackendError> {
        self.requests.lock().unwrap().push(request.clone());
        let mut cursor = self.cursor.lock().unwrap();
        let entry = self
            .script
            .get(*cursor)
            .ok_or(BackendError::ScriptExhausted { consumed: *cursor })?;
        if entry.mode != request.mode {
            return Err(BackendError::ModeMismatch {
                index: *cursor,
                expected: entry.mode,
                requested: request.mode,
            });
        }
        *cursor += 1;
        Ok(LmResponse {
            text: entry.text.clone(),
            finish_reason: FinishReason::Stop,
        })
    }
}

/// One scripted annotation response, matched on `(task, key)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationScriptEntry {
    pub task: AnnotationTask,
    pub key: String,
    pub response: String,
}

/// Read-only annotation client keyed by task and slot content, so lookups do
/// not depend on call order.
#[derive(Debug, Clone, Default)]
pub struct ScriptedAnnotationClient {
    responses: HashMap<(AnnotationTask, String), String>,
}

impl ScriptedAnnotationClient {
    pub fn new(entries: impl IntoIterator<Item = AnnotationScriptEntry>) -> Self {
        ScriptedAnnotationClient {
            responses: entries
                .into_iter()
                .map(|e| ((e.task, e.key), e.response))
                .collect(),
        }
    }
}

impl AnnotationClient for ScriptedAnnotationClient {
    fn complete(&self, request: &AnnotationRequest) -> Result<String, BackendError> {
        self.responses
            .get(&(request.task, request.key.clone()))
            .cloned()
            .ok_or_else(|| {
                BackendError::NoScriptedResponse(format!("{:?}: {}", request.task, request.key))
            })
    }
}
