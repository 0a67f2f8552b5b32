//! JSONL readers and writers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rpg_core::grammar::{serialize_trace, GenerationTrace};
use rpg_core::orchestrator::{QueryOutcome, QueryTask, RunStats};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Serialized writer: lines land in the order they are pushed.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self, IoError> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn push<T: Serialize>(&mut self, value: &T) -> Result<(), IoError> {
        let line = serde_json::to_string(value).expect("serializable line");
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<(), IoError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Wall time spent inside language-model calls.
    pub lm_ms: f64,
}

/// One line of `infer` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub id: String,
    pub task: QueryTask,
    pub trace: GenerationTrace,
    /// The trace in marker form; absent when the partial trace cannot be
    /// serialized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markup: Option<String>,
    pub final_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub stats: RunStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl TraceLine {
    pub fn new(id: &str, task: QueryTask, outcome: &QueryOutcome) -> Self {
        TraceLine {
            id: id.to_string(),
            task,
            markup: serialize_trace(&outcome.trace).ok(),
            final_answer: outcome.trace.final_answer(),
            error: outcome.error.as_ref().map(ToString::to_string),
            stats: outcome.stats,
            trace: outcome.trace.clone(),
            timings: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_lines_are_skipped_and_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "1\n\n2\n").unwrap();
        assert_eq!(read_jsonl::<u32>(&p).unwrap(), vec![1, 2]);
        std::fs::write(&p, "1\n{\n").unwrap();
        match read_jsonl::<u32>(&p) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
