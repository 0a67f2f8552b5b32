//! Answer scoring: containment accuracy, token F1, ROUGE-L and rougeLsum.
//!
//! Texts are normalized before scoring: lowercased, split on whitespace,
//! leading and trailing punctuation stripped from every token. Article
//! removal is available but off by default.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::QueryTask;
use crate::retrieval::split_sentences;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    /// Drop "a", "an", "the" (accuracy and token F1 only).
    pub strip_articles: bool,
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub fn normalized_tokens(text: &str, strip_articles: bool) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .filter(|t| !(strip_articles && ARTICLES.contains(&t.as_str())))
        .collect()
}

pub fn normalize(text: &str, strip_articles: bool) -> String {
    normalized_tokens(text, strip_articles).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub prediction: String,
    /// Non-empty list of acceptable answers.
    pub golds: Vec<String>,
}

impl EvalItem {
    pub fn new(prediction: impl Into<String>, golds: &[&str]) -> Self {
        EvalItem {
            prediction: prediction.into(),
            golds: golds.iter().map(|g| g.to_string()).collect(),
        }
    }
}

/// 1.0 if some normalized gold occurs in the normalized prediction.
pub fn match_accuracy(item: &EvalItem, norm: Normalization) -> f64 {
    let pred = normalize(&item.prediction, norm.strip_articles);
    let hit = item.golds.iter().any(|g| {
        let g = normalize(g, norm.strip_articles);
        if g.is_empty() {
            pred.is_empty()
        } else {
            pred.contains(&g)
        }
    });
    if hit {
        1.0
    } else {
        0.0
    }
}

fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Max over golds of the multiset token-overlap F1.
pub fn token_f1(item: &EvalItem, norm: Normalization) -> f64 {
    let pred = normalized_tokens(&item.prediction, norm.strip_articles);
    item.golds
        .iter()
        .map(|g| f1_tokens(&pred, &normalized_tokens(g, norm.strip_articles)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl RougeScore {
    const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f: 0.0,
    };
    const PERFECT: RougeScore = RougeScore {
        precision: 1.0,
        recall: 1.0,
        f: 1.0,
    };

    fn from_hits(hits: usize, pred_len: usize, gold_len: usize) -> Self {
        match (pred_len, gold_len) {
            (0, 0) => return Self::PERFECT,
            (0, _) | (_, 0) => return Self::ZERO,
            _ => {}
        }
        if hits == 0 {
            return Self::ZERO;
        }
        let precision = hits as f64 / pred_len as f64;
        let recall = hits as f64 / gold_len as f64;
        RougeScore {
            precision,
            recall,
            f: 2.0 * precision * recall / (precision + recall),
        }
    }
}

fn lcs_table(a: &[String], b: &[String]) -> Vec<Vec<usize>> {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// Positions in `a` of one longest common subsequence with `b`.
fn lcs_positions(a: &[String], b: &[String]) -> Vec<usize> {
    let dp = lcs_table(a, b);
    let (mut i, mut j) = (a.len(), b.len());
    let mut out = Vec::with_capacity(dp[i][j]);
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if dp[i - 1][j] >= dp[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

pub fn rouge_l(pred: &str, gold: &str) -> RougeScore {
    let p = normalized_tokens(pred, false);
    let g = normalized_tokens(gold, false);
    RougeScore::from_hits(lcs_len(&p, &g), p.len(), g.len())
}

/// Summary-level ROUGE-L: for each gold sentence, the union of its LCS
/// positions against every predicted sentence.
pub fn rouge_lsum(pred: &str, gold: &str) -> RougeScore {
    let sentences = |t: &str| -> Vec<Vec<String>> {
        split_sentences(t)
            .iter()
            .map(|s| normalized_tokens(s, false))
            .filter(|s| !s.is_empty())
            .collect()
    };
    let pred_sents = sentences(pred);
    let gold_sents = sentences(gold);
    let pred_len: usize = pred_sents.iter().map(Vec::len).sum();
    let gold_len: usize = gold_sents.iter().map(Vec::len).sum();
    let mut hits = 0;
    for g in &gold_sents {
        let mut union = vec![false; g.len()];
        for p in &pred_sents {
            for pos in lcs_positions(g, p) {
                union[pos] = true;
            }
        }
        hits += union.iter().filter(|&&x| x).count();
    }
    RougeScore::from_hits(hits, pred_len, gold_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    F1,
    RougeL,
    RougeLsum,
    /// Needs an external embedding model; always reports not-supported.
    Mauve,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("metric {0:?} is not supported")]
    NotSupported(Metric),
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::RougeL => "rouge_l",
            Metric::RougeLsum => "rouge_lsum",
            Metric::Mauve => "mauve",
        }
    }

    pub fn for_task(task: QueryTask) -> Vec<Metric> {
        match task {
            QueryTask::Short => vec![Metric::Accuracy],
            QueryTask::Multihop => vec![Metric::F1],
            QueryTask::Long => vec![Metric::RougeL, Metric::RougeLsum],
        }
    }

    /// Score against the best-matching gold.
    pub fn score(self, item: &EvalItem, norm: Normalization) -> Result<f64, MetricError> {
        let best = |f: fn(&str, &str) -> RougeScore| {
            item.golds
                .iter()
                .map(|g| f(&item.prediction, g).f)
                .fold(0.0, f64::max)
        };
        match self {
            Metric::Accuracy => Ok(match_accuracy(item, norm)),
            Metric::F1 => Ok(token_f1(item, norm)),
            Metric::RougeL => Ok(best(rouge_l)),
            Metric::RougeLsum => Ok(best(rouge_lsum)),
            Metric::Mauve => Err(MetricError::NotSupported(self)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("predictions and golds are misaligned: {0}")]
    LengthMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    pub golds: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub prediction: String,
    pub scores: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: QueryTask,
    pub metrics: Vec<Metric>,
    pub rows: Vec<EvalRow>,
    /// `None` when there are no items or the metric is unsupported.
    pub means: BTreeMap<String, Option<f64>>,
    pub unsupported: Vec<Metric>,
}

/// Scores `(id, prediction)` pairs against golds aligned by position and id.
pub fn evaluate_run(
    predictions: &[(String, String)],
    golds: &[GoldRecord],
    task: QueryTask,
    metrics: &[Metric],
    norm: Normalization,
) -> Result<EvalReport, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} predictions, {} gold records",
            predictions.len(),
            golds.len()
        )));
    }
    if let Some((i, ((pid, _), g))) = predictions
        .iter()
        .zip(golds)
        .enumerate()
        .find(|(_, ((pid, _), g))| *pid != g.id)
    {
        return Err(EvalError::LengthMismatch(format!(
            "line {}: prediction id {pid:?} vs gold id {:?}",
            i + 1,
            g.id
        )));
    }
    let mut unsupported = Vec::new();
    let mut rows = Vec::with_capacity(predictions.len());
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for ((id, prediction), gold) in predictions.iter().zip(golds) {
        let item = EvalItem {
            prediction: prediction.clone(),
            golds: gold.golds.clone(),
        };
        let mut scores = BTreeMap::new();
        for &m in metrics {
            let value = match m.score(&item, norm) {
                Ok(v) => {
                    *sums.entry(m.name()).or_default() += v;
                    Some(v)
                }
                Err(MetricError::NotSupported(m)) => {
                    if !unsupported.contains(&m) {
                        unsupported.push(m);
                    }
                    None
                }
            };
            scores.insert(m.name().to_string(), value);
        }
        rows.push(EvalRow {
            id: id.clone(),
            prediction: prediction.clone(),
            scores,
        });
    }
    let n = rows.len();
    let means = metrics
        .iter()
        .map(|m| {
            let mean = (n > 0)
                .then(|| sums.get(m.name()).map(|s| s / n as f64))
                .flatten();
            (m.name().to_string(), mean)
        })
        .collect();
    Ok(EvalReport {
        task,
        metrics: metrics.to_vec(),
        rows,
        means,
        unsupported,
    })
}

impl EvalReport {
    /// Fixed-width text table, one row per item plus a mean row.
    pub fn to_table(&self) -> String {
        let names: Vec<&str> = self.metrics.iter().map(|m| m.name()).collect();
        let id_width = self
            .rows
            .iter()
            .map(|r| r.id.chars().count())
            .chain(["id".len(), "mean".len()])
            .max()
            .unwrap_or(4);
        let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = write!(out, "{:<id_width$}", "id");
        for n in &names {
            let _ = write!(out, "  {n:>10}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<id_width$}", row.id);
            for n in &names {
                let _ = write!(out, "  {:>10}", cell(row.scores.get(*n).copied().flatten()));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<id_width$}", "mean");
        for n in &names {
            let _ = write!(out, "  {:>10}", cell(self.means.get(*n).copied().flatten()));
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const N: Normalization = Normalization {
        strip_articles: false,
    };

    #[test]
    fn accuracy_is_containment() {
        assert_eq!(match_accuracy(&EvalItem::new("The answer is Paris.", &["paris"]), N), 1.0);
        assert_eq!(match_accuracy(&EvalItem::new("london", &["paris"]), N), 0.0);
        assert_eq!(match_accuracy(&EvalItem::new("true", &["false", "True"]), N), 1.0);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(token_f1(&EvalItem::new("a b c", &["a b c"]), N), 1.0);
        assert!((token_f1(&EvalItem::new("a b c", &["b c d"]), N) - 2.0 / 3.0).abs() <= 1e-12);
        assert_eq!(token_f1(&EvalItem::new("x y", &["z"]), N), 0.0);
        assert_eq!(token_f1(&EvalItem::new("", &[""]), N), 1.0);
        assert_eq!(token_f1(&EvalItem::new("", &["x"]), N), 0.0);
        assert_eq!(token_f1(&EvalItem::new("x", &[""]), N), 0.0);
    }

    #[test]
    fn article_stripping_is_opt_in() {
        let item = EvalItem::new("a b c", &["b c d"]);
        let strip = Normalization {
            strip_articles: true,
        };
        // without "a": P = 1, R = 2/3
        assert!((token_f1(&item, strip) - 0.8).abs() < 1e-12);
        assert_eq!(match_accuracy(&EvalItem::new("Paris", &["the Paris"]), strip), 1.0);
        assert_eq!(match_accuracy(&EvalItem::new("Paris", &["the Paris"]), N), 0.0);
    }

    #[test]
    fn f1_counts_duplicates_once_each() {
        // overlap of {the, the, cat} with {the, cat, cat} is 2
        let v = token_f1(&EvalItem::new("the the cat", &["the cat cat"]), N);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_cases() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), RougeScore::PERFECT);
        assert_eq!(rouge_l("", "x"), RougeScore::ZERO);
        assert_eq!(rouge_l("a b", "c d"), RougeScore::ZERO);
        // LCS("a b c d e", "a c e f") = 3; P = 3/5, R = 3/4
        let s = rouge_l("a b c d e", "a c e f");
        assert!((s.precision - 0.6).abs() < 1e-12);
        assert!((s.recall - 0.75).abs() < 1e-12);
        assert!((s.f - 2.0 * 0.6 * 0.75 / 1.35).abs() < 1e-12);
    }

    #[test]
    fn rouge_lsum_contained_sentences() {
        // each gold sentence sits inside a different predicted sentence:
        // union hits = 2 + 2 = 4 of 4 gold tokens, 4 of 8 predicted tokens
        let pred = "x cats purr y. z dogs bark w.";
        let gold = "cats purr. dogs bark.";
        let s = rouge_lsum(pred, gold);
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 0.5);
        assert!((s.f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_lsum("q r s.", "t u."), RougeScore::ZERO);
    }

    #[test]
    fn rouge_lsum_single_sentence_equals_rouge_l() {
        for (p, g) in [("a b c d e", "a c e f"), ("the cat", "cat the"), ("x", "x y z")] {
            assert_eq!(rouge_lsum(p, g), rouge_l(p, g));
        }
    }

    #[test]
    fn scoring_ignores_case_and_outer_whitespace() {
        let a = rouge_l("  The Cat SAT. ", "the cat sat");
        assert_eq!(a, RougeScore::PERFECT);
        assert_eq!(token_f1(&EvalItem::new(" PARIS ", &["paris"]), N), 1.0);
    }

    #[test]
    fn empty_report_has_null_means() {
        let r = evaluate_run(&[], &[], QueryTask::Short, &[Metric::Accuracy], N).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.means["accuracy"], None);
    }

    #[test]
    fn report_means_and_alignment() {
        let preds = vec![("1".to_string(), "paris".to_string()), ("2".to_string(), "rome".to_string())];
        let golds = vec![
            GoldRecord { id: "1".into(), golds: vec!["Paris".into()] },
            GoldRecord { id: "2".into(), golds: vec!["Madrid".into()] },
        ];
        let r = evaluate_run(&preds, &golds, QueryTask::Short, &[Metric::Accuracy, Metric::Mauve], N).unwrap();
        assert_eq!(r.means["accuracy"], Some(0.5));
        assert_eq!(r.means["mauve"], None);
        assert_eq!(r.unsupported, [Metric::Mauve]);
        assert!(r.to_table().contains("mean"));
        let mut swapped = golds.clone();
        swapped.swap(0, 1);
        assert!(evaluate_run(&preds, &swapped, QueryTask::Short, &[Metric::Accuracy], N).is_err());
        assert!(evaluate_run(&preds, &golds[..1], QueryTask::Short, &[Metric::Accuracy], N).is_err());
    }
}
