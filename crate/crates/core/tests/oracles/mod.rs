//! Independent reference implementations used as test oracles.
//!
//! Each one recomputes a quantity the slow, obvious way so library results
//! can be checked against it. Shared with the acceptance target.

#![allow(dead_code)]

use std::collections::HashMap;

use rpg_core::dataset::Spans;
use rpg_core::grammar::{GenerationTrace, Segment};
use rpg_core::retrieval::Document;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn doc_text(d: &Document) -> String {
    match &d.title {
        Some(t) if !t.is_empty() => format!("{t} {}", d.body),
        _ => d.body.clone(),
    }
}

/// Okapi BM25 by direct summation over every (query token, document) pair.
/// Returns matching documents as (doc_id, score), best first, ties by id.
pub fn bm25_brute_force(corpus: &[Document], query: &str) -> Vec<(String, f64)> {
    let docs: Vec<Vec<String>> = corpus.iter().map(|d| words(&doc_text(d))).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut out = Vec::new();
    for (d, toks) in corpus.iter().zip(&docs) {
        let mut score = 0.0;
        let mut matched = false;
        for q in words(query) {
            let tf = toks.iter().filter(|t| **t == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            matched = true;
            let df = docs.iter().filter(|t| t.contains(&q)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            let dl = toks.len() as f64;
            score += idf * (tf * (K1 + 1.0)) / (tf + K1 * (1.0 - B + B * dl / avgdl));
        }
        if matched {
            out.push((d.doc_id.clone(), score));
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

/// `P ∘ (u vᵀ)` with nested loops over plain vectors.
pub fn compose_elementwise(p: &[Vec<f64>], u: &[f64], v: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; v.len()]; u.len()];
    for i in 0..u.len() {
        for j in 0..v.len() {
            out[i][j] = p[i][j] * (u[i] * v[j]);
        }
    }
    out
}

/// Rank by Gaussian elimination with partial pivoting.
pub fn rank_gauss(rows: &[Vec<f64>], tol: f64) -> usize {
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let n_rows = a.len();
    let n_cols = a.first().map_or(0, Vec::len);
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let mut rank = 0;
    for col in 0..n_cols {
        if rank == n_rows {
            break;
        }
        let pivot = (rank..n_rows)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() <= tol * scale {
            continue;
        }
        a.swap(rank, pivot);
        for r in rank + 1..n_rows {
            let f = a[r][col] / a[rank][col];
            let pivot_row = a[rank].clone();
            for (x, p) in a[r][col..n_cols].iter_mut().zip(&pivot_row[col..n_cols]) {
                *x -= f * p;
            }
        }
        rank += 1;
    }
    rank
}

/// Masked NLL with a plain log of summed exponentials per position.
/// Only valid for moderate logits.
pub fn masked_nll_loop(logits: &[Vec<f64>], targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    for t in 0..targets.len() {
        if !mask[t] {
            continue;
        }
        let z: f64 = logits[t].iter().map(|x| x.exp()).sum();
        total += z.ln() - logits[t][targets[t]];
    }
    total
}

/// LCS length by memoized recursion.
pub fn lcs_memo(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// ROUGE-L F from the memoized LCS, on lowercase whitespace tokens with
/// outer punctuation removed.
pub fn rouge_l_f_oracle(pred: &str, gold: &str) -> f64 {
    let toks = |s: &str| -> Vec<String> {
        s.split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|t| !t.is_empty())
            .collect()
    };
    let (p, g) = (toks(pred), toks(gold));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let l = lcs_memo(&p, &g) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (l / p.len() as f64, l / g.len() as f64);
    2.0 * prec * rec / (prec + rec)
}

/// Best `k` indices by exhaustive search over all `k`-subsets: maximal
/// score sum, then lexicographically smallest. Scores should be exactly
/// representable so sums compare exactly.
pub fn exhaustive_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut pick = Vec::with_capacity(k);
    fn rec(
        scores: &[f64],
        k: usize,
        start: usize,
        pick: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if pick.len() == k {
            let sum: f64 = pick.iter().map(|&i| scores[i]).sum();
            let better = match best {
                None => true,
                Some((s, v)) => sum > *s || (sum == *s && pick.as_slice() < v.as_slice()),
            };
            if better {
                *best = Some((sum, pick.clone()));
            }
            return;
        }
        for i in start..scores.len() {
            pick.push(i);
            rec(scores, k, i + 1, pick, best);
            pick.pop();
        }
    }
    rec(scores, k, 0, &mut pick, &mut best);
    best.map(|(_, v)| v).unwrap_or_default()
}

/// Re-derives plan and answer character spans from a parsed trace by
/// laying the markup out again piece by piece.
pub fn spans_from_trace(trace: &GenerationTrace) -> (Spans, Spans) {
    let len = |s: &str| s.chars().count();
    let mut pos = 0;
    let mut plans = Vec::new();
    let mut answers = Vec::new();
    let payload = |pos: &mut usize, open: &str, body: &str, close: &str| {
        *pos += len(open);
        let span = (*pos, *pos + len(body));
        *pos += len(body) + len(close);
        span
    };
    if !trace.needs_retrieval {
        pos += len("<NOT_NEED_EXTRA_INFO>");
        answers.push((pos, pos + len(&trace.segments[0].answer)));
        return (plans, answers);
    }
    for Segment {
        preamble,
        plan,
        coarse_paragraph,
        fine_paragraph,
        answer,
    } in &trace.segments
    {
        pos += len(preamble);
        plans.push(payload(&mut pos, "<plan_start>", plan, "<plan_end>"));
        if let Some(c) = coarse_paragraph {
            payload(&mut pos, "<paragraph>", c, "</paragraph>");
        }
        if let Some(f) = fine_paragraph {
            payload(&mut pos, "<fparagraph>", f, "</fparagraph>");
        }
        answers.push(payload(&mut pos, "<answer_start>", answer, "<answer_end>"));
    }
    if let Some(c) = &trace.combine_answer {
        pos += len("[Combine]");
        answers.push(payload(&mut pos, "<answer_start>", c, "<answer_end>"));
    }
    (plans, answers)
}

/// Appendix record fixtures as (name, input, target).
pub fn appendix_records() -> Vec<(&'static str, String, String)> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/appendix");
    ["openbookqa", "natural_questions", "fever", "arc_easy", "asqa", "hotpotqa"]
        .into_iter()
        .map(|name| {
            let read = |ext: &str| {
                std::fs::read_to_string(format!("{dir}/{name}.{ext}.txt"))
                    .unwrap_or_else(|e| panic!("fixture {name}.{ext}: {e}"))
                    .trim_end_matches('\n')
                    .to_string()
            };
            (name, read("input"), read("target"))
        })
        .collect()
}

/// The FEVER appendix record as a source example plus the scripted
/// annotation responses that should rebuild it: the plan restates the claim
/// and the evidence is the first sentence of the single passage.
pub fn fever_source() -> (
    rpg_core::dataset::SourceExample,
    Vec<rpg_core::backend::AnnotationScriptEntry>,
    String,
) {
    use rpg_core::backend::{AnnotationScriptEntry, AnnotationTask};
    use rpg_core::dataset::{evidence_key, DatasetKind, SourceExample};

    let (_, input, target) = appendix_records()
        .into_iter()
        .find(|(n, _, _)| *n == "fever")
        .unwrap();
    let parsed = rpg_core::grammar::parse_trace(&target).unwrap();
    let body = parsed.segments[0].coarse_paragraph.clone().unwrap();
    let plan = "Evan Goldberg is a Canadian director.";
    let example = SourceExample {
        id: Some("fever-goldberg".into()),
        dataset_kind: DatasetKind::ShortForm,
        question: input.clone(),
        answer_segments: vec!["true".into()],
        documents: vec![Document {
            doc_id: "evan_goldberg".into(),
            title: None,
            body,
        }],
        qa_subpairs: None,
        needs_retrieval: true,
    };
    let entries = vec![
        AnnotationScriptEntry {
            task: AnnotationTask::ShortFormPlan,
            key: input,
            response: format!("[Plan: {plan}]"),
        },
        AnnotationScriptEntry {
            task: AnnotationTask::Evidence,
            key: evidence_key(plan, "true"),
            response: "[0]".into(),
        },
    ];
    (example, entries, target)
}
