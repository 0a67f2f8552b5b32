//! Engine configuration file (TOML).
//!
//! ```toml
//! prompt_template = "rpg_inference_v1"
//! in_flight = 4
//! metrics = ["accuracy"]
//!
//! [run]
//! plan_token_cap = 30
//! answer_token_cap = 100
//! max_iterations = 3
//! retrieval_k = 5
//! evidence_k = 5
//! evidence_mode = "selected"
//! stop_on_plan_repeat = true
//!
//! [backends]
//! mock_script = "mock_script.json"   # or lm_url = "http://host:port"
//! reranker_url = "http://host:port"  # optional; lexical scoring otherwise
//! annotation_url = "http://host:port"
//! timeout_ms = 30000
//! retries = 2
//! backoff_ms = 100
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use rpg_core::metrics::Metric;
use rpg_core::prompt::{builtin_template, DEFAULT_TEMPLATE_NAME};
use rpg_core::RunConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm_url: Option<String>,
    /// Canned per-query language-model responses, for offline runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reranker_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotation_url: Option<String>,
    /// Per attempt.
    pub timeout_ms: u64,
    /// Extra attempts after the first.
    pub retries: u32,
    /// Delay before the first retry; doubles on each later one.
    pub backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            lm_url: None,
            mock_script: None,
            reranker_url: None,
            annotation_url: None,
            timeout_ms: 30_000,
            retries: 2,
            backoff_ms: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Built-in template name or path to a template file.
    pub prompt_template: String,
    /// Queries run concurrently.
    pub in_flight: usize,
    /// Metrics for `eval`; the task's defaults when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<Metric>>,
    pub run: RunConfig,
    pub backends: BackendConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            prompt_template: DEFAULT_TEMPLATE_NAME.to_string(),
            in_flight: 4,
            metrics: None,
            run: RunConfig::default(),
            backends: BackendConfig::default(),
        }
    }
}

pub fn check_url(field: &str, url: &str) -> Result<(), ConfigError> {
    let bad = |why: &str| ConfigError::Invalid(format!("{field} {url:?}: {why}"));
    let uri: ureq::http::Uri = url.parse().map_err(|_| bad("not a URL"))?;
    match uri.scheme_str() {
        Some("http" | "https") => {}
        _ => return Err(bad("scheme must be http or https")),
    }
    if uri.host().is_none_or(str::is_empty) {
        return Err(bad("missing host"));
    }
    Ok(())
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(script) = &config.backends.mock_script {
            if script.is_relative() {
                config.backends.mock_script = Some(base.join(script));
            }
        }
        if builtin_template(&config.prompt_template).is_none() {
            let p = Path::new(&config.prompt_template);
            if p.is_relative() {
                config.prompt_template = base.join(p).to_string_lossy().into_owned();
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.in_flight == 0 {
            return Err(ConfigError::Invalid("in_flight must be at least 1".into()));
        }
        if self.backends.timeout_ms == 0 {
            return Err(ConfigError::Invalid("timeout_ms must be positive".into()));
        }
        let b = &self.backends;
        match (&b.lm_url, &b.mock_script) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "set only one of backends.lm_url and backends.mock_script".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "set one of backends.lm_url or backends.mock_script".into(),
                ))
            }
            _ => {}
        }
        for (field, url) in [
            ("lm_url", &b.lm_url),
            ("reranker_url", &b.reranker_url),
            ("annotation_url", &b.annotation_url),
        ] {
            if let Some(u) = url {
                check_url(field, u)?;
            }
        }
        Ok(())
    }

    /// Template text: a built-in name or the contents of a file.
    pub fn template_text(&self) -> Result<String, ConfigError> {
        match builtin_template(&self.prompt_template) {
            Some(t) => Ok(t.to_string()),
            None => std::fs::read_to_string(&self.prompt_template).map_err(|source| {
                ConfigError::Read {
                    path: PathBuf::from(&self.prompt_template),
                    source,
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rpg_core::EvidenceMode;

    fn mock() -> EngineConfig {
        EngineConfig {
            backends: BackendConfig {
                mock_script: Some("s.json".into()),
                ..BackendConfig::default()
            },
            ..EngineConfig::default()
        }
    }

    #[test]
    fn defaults_match_the_reference_settings() {
        let c = EngineConfig::from_toml("[backends]\nmock_script = \"s.json\"\n").unwrap();
        assert_eq!(c.run.plan_token_cap, 30);
        assert_eq!(c.run.answer_token_cap, 100);
        assert_eq!(c.run.max_iterations, 3);
        assert_eq!(c.run.retrieval_k, 5);
        assert_eq!(c.in_flight, 4);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn dump_then_load_round_trips() {
        let mut c = mock();
        c.metrics = Some(vec![Metric::RougeL, Metric::Mauve]);
        c.run.evidence_mode = EvidenceMode::PassthroughFullDocs;
        c.backends.reranker_url = Some("http://127.0.0.1:9000".into());
        assert_eq!(EngineConfig::from_toml(&c.to_toml()).unwrap(), c);
        let d = EngineConfig::default();
        assert_eq!(EngineConfig::from_toml(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn exactly_one_lm_source() {
        let mut c = mock();
        c.backends.lm_url = Some("http://localhost:8080".into());
        assert!(c.validate().is_err());
        c.backends.mock_script = None;
        assert!(c.validate().is_ok());
        c.backends.lm_url = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn malformed_urls_are_rejected() {
        for url in ["localhost:80", "ftp://x", "http://", "not a url"] {
            let mut c = mock();
            c.backends.reranker_url = Some(url.into());
            assert!(c.validate().is_err(), "{url}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(EngineConfig::from_toml("bogus = 1").is_err());
        assert!(EngineConfig::from_toml("[run]\nplan_cap = 3").is_err());
    }
}
