//! Retrieve-plan-generate engine.
//!
//! Answers are produced segment by segment: a short plan names the topic of
//! the next segment, sentence-level evidence for that plan is selected from
//! retrieved passages, and the segment is generated from it. The crate holds
//! the markup grammar shared by training records and generations, the
//! inference loop, dataset construction, evaluation metrics and the numeric
//! core for multi-task soft prompts.

pub mod backend;
pub mod dataset;
pub mod grammar;
pub mod metrics;
pub mod numeric;
pub mod orchestrator;
pub mod prompt;
pub mod retrieval;

pub use backend::{
    AnnotationClient, BackendError, LmBackend, LmMode, LmRequest, LmResponse, MockLmBackend,
    ScriptEntry, SentenceScorer,
};
pub use grammar::{parse_trace, serialize_trace, GenerationTrace, MarkerKind, Segment, Termination};
pub use orchestrator::{Engine, QueryOutcome, RunConfig};
pub use retrieval::{Document, EvidenceMode, LexicalIndex, LexicalScorer, Passage};
