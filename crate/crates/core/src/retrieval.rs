//! Lexical retrieval over a document corpus and sentence-level evidence
//! selection.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, SentenceScorer};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// A corpus entry as read from corpus JSONL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: Option<String>,
    pub body: String,
}

impl Document {
    /// Title and body, as seen by the lexical index.
    pub fn indexed_text(&self) -> String {
        match &self.title {
            Some(t) if !t.is_empty() => format!("{t} {}", self.body),
            _ => self.body.clone(),
        }
    }
}

/// A ranked retrieval hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    /// 1-based, contiguous within one result list.
    pub rank: usize,
    pub title: Option<String>,
    pub body: String,
    pub score: f64,
}

impl Passage {
    pub fn sentences(&self) -> Vec<Sentence> {
        split_sentences(&self.body)
            .into_iter()
            .enumerate()
            .map(|(sentence_index, text)| Sentence {
                doc_id: self.doc_id.clone(),
                sentence_index,
                text,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub doc_id: String,
    pub sentence_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("k must be at least 1")]
    ZeroK,
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrievalError>;
}

/// Inverted index scored with Okapi BM25.
#[derive(Debug, Clone)]
pub struct LexicalIndex {
    docs: Vec<Document>,
    doc_lengths: Vec<usize>,
    /// term -> (doc position, term frequency)
    postings: HashMap<String, Vec<(usize, u32)>>,
    avg_doc_length: f64,
}

impl LexicalIndex {
    pub fn build(corpus: Vec<Document>) -> Result<Self, RetrievalError> {
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for d in &corpus {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(RetrievalError::DuplicateDocId(d.doc_id.clone()));
            }
        }
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (pos, doc) in corpus.iter().enumerate() {
            let tokens = tokenize(&doc.indexed_text());
            doc_lengths.push(tokens.len());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((pos, count));
            }
        }
        let total: usize = doc_lengths.iter().sum();
        Ok(LexicalIndex {
            avg_doc_length: total as f64 / corpus.len() as f64,
            docs: corpus,
            doc_lengths,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.docs
            .iter()
            .position(|d| d.doc_id == doc_id)
            .map(|i| self.doc_lengths[i])
    }

    /// BM25 scores of every document matching at least one query term,
    /// sorted by descending score then ascending doc_id.
    pub fn score_all(&self, query: &str) -> Vec<(usize, f64)> {
        let n = self.docs.len() as f64;
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            for &(pos, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - BM25_B + BM25_B * self.doc_lengths[pos] as f64 / self.avg_doc_length;
                *scores.entry(pos).or_insert(0.0) += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.docs[a.0].doc_id.cmp(&self.docs[b.0].doc_id))
        });
        ranked
    }
}

impl Retriever for LexicalIndex {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        Ok(self
            .score_all(query)
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (pos, score))| {
                let d = &self.docs[pos];
                Passage {
                    doc_id: d.doc_id.clone(),
                    rank: i + 1,
                    title: d.title.clone(),
                    body: d.body.clone(),
                    score,
                }
            })
            .collect())
    }
}

/// Sentence boundary detection at `.`, `?`, `!` followed by whitespace or
/// end of text. A `.` closing a listed abbreviation does not end a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSplitter {
    pub abbreviations: Vec<String>,
}

impl Default for SentenceSplitter {
    fn default() -> Self {
        let abbrevs = [
            "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "e.g", "i.e", "inc", "ltd",
            "co", "corp", "no", "mt", "ft", "approx", "dept", "gen", "gov", "lt", "col", "sgt",
        ];
        SentenceSplitter {
            abbreviations: abbrevs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];

impl SentenceSplitter {
    pub fn split(&self, text: &str) -> Vec<String> {
        let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
        let chars: Vec<(usize, char)> = normalized.char_indices().collect();
        let mut out = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < chars.len() {
            let (_, c) = chars[i];
            if !matches!(c, '.' | '?' | '!') {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < chars.len() && (matches!(chars[j].1, '.' | '?' | '!') || CLOSERS.contains(&chars[j].1)) {
                j += 1;
            }
            let at_end = j == chars.len();
            if at_end || chars[j].1 == ' ' {
                let end = if at_end { normalized.len() } else { chars[j].0 };
                if c == '.' && self.is_abbreviation(&normalized[start..chars[i].0]) && !at_end {
                    i = j;
                    continue;
                }
                let sentence = normalized[start..end].trim();
                if !sentence.is_empty() {
                    out.push(sentence.to_string());
                }
                start = end;
            }
            i = j;
        }
        let tail = normalized[start..].trim();
        if !tail.is_empty() {
            out.push(tail.to_string());
        }
        out
    }

    fn is_abbreviation(&self, before_dot: &str) -> bool {
        let mut words = before_dot.rsplit(' ');
        let word = words
            .next()
            .unwrap_or("")
            .trim_start_matches(|c: char| !c.is_alphanumeric());
        if word.is_empty() {
            return false;
        }
        // a middle initial: "Alexander H. Key"
        let mut chars = word.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            let prev_capitalized = words
                .next()
                .and_then(|w| w.chars().next())
                .is_some_and(char::is_uppercase);
            if c.is_uppercase() && prev_capitalized {
                return true;
            }
        }
        let word = word.to_lowercase();
        self.abbreviations.contains(&word)
    }
}

pub fn split_sentences(text: &str) -> Vec<String> {
    SentenceSplitter::default().split(text)
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "been", "but", "by", "did", "do", "does", "for",
    "from", "had", "has", "have", "he", "her", "his", "how", "i", "if", "in", "into", "is", "it",
    "its", "of", "on", "or", "she", "so", "that", "the", "their", "them", "then", "there", "these",
    "they", "this", "those", "to", "was", "we", "were", "what", "when", "where", "which", "who",
    "whom", "why", "will", "with", "you", "your",
];

fn content_words(text: &str) -> HashSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Fraction of the plan's content words that occur in the sentence.
pub fn lexical_score(plan: &str, sentence: &str) -> f64 {
    let plan_words = content_words(plan);
    if plan_words.is_empty() {
        return 0.0;
    }
    let sentence_words = content_words(sentence);
    let hits = plan_words.intersection(&sentence_words).count();
    hits as f64 / plan_words.len() as f64
}

/// Local stand-in for a cross-encoder reranker.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl SentenceScorer for LexicalScorer {
    fn score(&self, plan: &str, sentences: &[&str]) -> Result<Vec<f64>, BackendError> {
        Ok(sentences.iter().map(|s| lexical_score(plan, s)).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceMode {
    /// Rerank sentences and keep the top `k_s`.
    #[default]
    Selected,
    /// Whole passages, unscored.
    PassthroughFullDocs,
    /// No evidence and no retrieval.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSelection {
    pub plan: String,
    /// In source order: passage rank, then sentence index. In passthrough
    /// mode each entry is a whole passage body.
    pub sentences: Vec<Sentence>,
    /// Parallel to `sentences` in `Selected` mode; empty otherwise.
    pub scores: Vec<f64>,
    pub mode: EvidenceMode,
}

impl EvidenceSelection {
    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Evidence entries joined by single spaces.
    pub fn text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvidenceError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("scorer returned {got} scores for {expected} sentences")]
    ScoreCount { expected: usize, got: usize },
    #[error("k_s must be at least 1")]
    ZeroK,
}

pub fn select_evidence(
    plan: &str,
    passages: &[Passage],
    scorer: &dyn SentenceScorer,
    k_s: usize,
    mode: EvidenceMode,
) -> Result<EvidenceSelection, EvidenceError> {
    if k_s == 0 {
        return Err(EvidenceError::ZeroK);
    }
    let mut ordered: Vec<&Passage> = passages.iter().collect();
    ordered.sort_by_key(|p| p.rank);
    let mut sel = EvidenceSelection {
        plan: plan.to_string(),
        sentences: Vec::new(),
        scores: Vec::new(),
        mode,
    };
    match mode {
        EvidenceMode::Disabled => {}
        EvidenceMode::PassthroughFullDocs => {
            sel.sentences = ordered
                .iter()
                .map(|p| Sentence {
                    doc_id: p.doc_id.clone(),
                    sentence_index: 0,
                    text: p.body.clone(),
                })
                .collect();
        }
        EvidenceMode::Selected => {
            // candidates are already in (rank, sentence_index) order
            let candidates: Vec<Sentence> = ordered.iter().flat_map(|p| p.sentences()).collect();
            if candidates.is_empty() {
                return Ok(sel);
            }
            let texts: Vec<&str> = candidates.iter().map(|s| s.text.as_str()).collect();
            let scores = scorer.score(plan, &texts)?;
            if scores.len() != candidates.len() {
                return Err(EvidenceError::ScoreCount {
                    expected: candidates.len(),
                    got: scores.len(),
                });
            }
            let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            // stable: equal scores keep source order
            order.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])));
            let mut keep: Vec<usize> = order.into_iter().take(k_s).collect();
            keep.sort_unstable();
            sel.scores = keep.iter().map(|&i| scores[i]).collect();
            sel.sentences = keep.into_iter().map(|i| candidates[i].clone()).collect();
        }
    }
    Ok(sel)
}
