//! JSON-over-HTTP clients for remote language-model, reranker and
//! annotation services.
//!
//! | role       | request                                                      | response                 |
//! |------------|--------------------------------------------------------------|--------------------------|
//! | LM         | `POST /generate {mode, prompt, max_new_tokens, stop, temperature}` | `{text, finish_reason}` |
//! | reranker   | `POST /score {query, sentences}`                             | `{scores}`               |
//! | annotation | `POST /complete {prompt}`                                    | `{text}`                 |
//!
//! Timeouts, transport errors, 429 and 5xx are retried with exponential
//! backoff. Everything else fails at once. A call never takes longer than
//! `timeout × (retries + 1)` in total, backoff included.

use std::thread;
use std::time::{Duration, Instant};

use rpg_core::backend::{
    AnnotationClient, AnnotationRequest, BackendError, FailureCause, FinishReason, LmBackend,
    LmMode, LmRequest, LmResponse, SentenceScorer,
};
use rpg_core::prompt;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::BackendConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
}

impl RetryPolicy {
    pub fn from_config(b: &BackendConfig) -> Self {
        RetryPolicy {
            timeout: Duration::from_millis(b.timeout_ms),
            retries: b.retries,
            backoff: Duration::from_millis(b.backoff_ms),
        }
    }

    /// Upper bound on the wall time of one call.
    pub fn budget(&self) -> Duration {
        self.timeout * (self.retries + 1)
    }
}

/// Shared plumbing: one agent, one base URL, one retry policy.
#[derive(Debug, Clone)]
pub struct JsonEndpoint {
    agent: ureq::Agent,
    base: String,
    policy: RetryPolicy,
}

enum Attempt {
    Retry(FailureCause),
    Fatal(FailureCause),
}

impl JsonEndpoint {
    pub fn new(base: &str, policy: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        JsonEndpoint {
            agent,
            base: base.trim_end_matches('/').to_string(),
            policy,
        }
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, BackendError> {
        let url = format!("{}{}", self.base, path);
        let deadline = Instant::now() + self.policy.budget();
        let mut delay = self.policy.backoff;
        let mut attempt = 0;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(FailureCause::Timeout.into());
            }
            let cause = match self.attempt(&url, body, self.policy.timeout.min(remaining)) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(cause)) => return Err(cause.into()),
                Err(Attempt::Retry(cause)) => cause,
            };
            if attempt >= self.policy.retries {
                return Err(cause.into());
            }
            attempt += 1;
            log::warn!("{url}: {cause}; retry {attempt}/{}", self.policy.retries);
            let remaining = deadline.saturating_duration_since(Instant::now());
            if delay >= remaining {
                return Err(cause.into());
            }
            thread::sleep(delay);
            delay *= 2;
        }
    }

    fn attempt<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        body: &B,
        timeout: Duration,
    ) -> Result<R, Attempt> {
        let sent = self
            .agent
            .post(url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .send_json(body);
        let mut response = match sent {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Attempt::Retry(FailureCause::Timeout)),
            Err(e) => return Err(Attempt::Retry(FailureCause::Transport(e.to_string()))),
        };
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let cause = FailureCause::Status(status);
            return Err(if status == 429 || status >= 500 {
                Attempt::Retry(cause)
            } else {
                Attempt::Fatal(cause)
            });
        }
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(Attempt::Retry(FailureCause::Timeout)),
            Err(e) => return Err(Attempt::Retry(FailureCause::Transport(e.to_string()))),
        };
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(FailureCause::Schema(e.to_string())))
    }
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    mode: LmMode,
    prompt: &'a str,
    max_new_tokens: usize,
    stop: &'a [String],
    temperature: f64,
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

fn finish_reason(s: Option<&str>) -> FinishReason {
    match s {
        Some("length") => FinishReason::Length,
        Some("error") => FinishReason::Error,
        _ => FinishReason::Stop,
    }
}

/// Remote language model; requests are rendered through a prompt template.
#[derive(Debug, Clone)]
pub struct HttpLm {
    endpoint: JsonEndpoint,
    template: String,
}

impl HttpLm {
    pub fn new(base: &str, policy: RetryPolicy, template: String) -> Self {
        HttpLm {
            endpoint: JsonEndpoint::new(base, policy),
            template,
        }
    }
}

impl LmBackend for HttpLm {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, BackendError> {
        let prompt = prompt::render(&self.template, request);
        let body = GenerateBody {
            mode: request.mode,
            prompt: &prompt,
            max_new_tokens: request.max_new_tokens,
            stop: &request.stop,
            temperature: request.temperature,
        };
        let reply: GenerateReply = self.endpoint.post("/generate", &body)?;
        let finish_reason = finish_reason(reply.finish_reason.as_deref());
        if finish_reason == FinishReason::Error {
            return Err(FailureCause::Reported(reply.text).into());
        }
        Ok(LmResponse {
            text: reply.text,
            finish_reason,
        })
    }
}

#[derive(Serialize)]
struct ScoreBody<'a> {
    query: &'a str,
    sentences: &'a [&'a str],
}

#[derive(Deserialize)]
struct ScoreReply {
    scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HttpReranker {
    endpoint: JsonEndpoint,
}

impl HttpReranker {
    pub fn new(base: &str, policy: RetryPolicy) -> Self {
        HttpReranker {
            endpoint: JsonEndpoint::new(base, policy),
        }
    }
}

impl SentenceScorer for HttpReranker {
    fn score(&self, plan: &str, sentences: &[&str]) -> Result<Vec<f64>, BackendError> {
        let reply: ScoreReply = self.endpoint.post(
            "/score",
            &ScoreBody {
                query: plan,
                sentences,
            },
        )?;
        if reply.scores.len() != sentences.len() {
            return Err(FailureCause::Schema(format!(
                "{} scores for {} sentences",
                reply.scores.len(),
                sentences.len()
            ))
            .into());
        }
        if reply.scores.iter().any(|s| !s.is_finite()) {
            return Err(FailureCause::Schema("non-finite score".into()).into());
        }
        Ok(reply.scores)
    }
}

#[derive(Serialize)]
struct CompleteBody<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CompleteReply {
    text: String,
}

#[derive(Debug, Clone)]
pub struct HttpAnnotation {
    endpoint: JsonEndpoint,
}

impl HttpAnnotation {
    pub fn new(base: &str, policy: RetryPolicy) -> Self {
        HttpAnnotation {
            endpoint: JsonEndpoint::new(base, policy),
        }
    }
}

impl AnnotationClient for HttpAnnotation {
    fn complete(&self, request: &AnnotationRequest) -> Result<String, BackendError> {
        let reply: CompleteReply = self.endpoint.post(
            "/complete",
            &CompleteBody {
                prompt: &request.prompt,
            },
        )?;
        Ok(reply.text)
    }
}
