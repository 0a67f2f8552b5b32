//! Special-token markup for plans, evidence paragraphs and answer segments.
//!
//! A record is a sequence of segments, each laid out as
//!
//! ```text
//! [preamble]<plan_start>PLAN<plan_end>[<paragraph>..</paragraph>][<fparagraph>..</fparagraph>]<answer_start>ANSWER<answer_end>
//! ```
//!
//! optionally followed by `[Combine]<answer_start>FINAL<answer_end>` and a
//! closing `<EOS>`. A record that starts with `<NOT_NEED_EXTRA_INFO>` carries
//! a bare answer and nothing else.
//!
//! Markers are matched byte-exactly. Any `<identifier>` token that is not in
//! the inventory is rejected rather than treated as text; a `<` that does not
//! open such a token (`a < b`) is ordinary text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarkerKind {
    PlanOpen,
    PlanClose,
    ParagraphOpen,
    ParagraphClose,
    FParagraphOpen,
    FParagraphClose,
    AnswerOpen,
    AnswerClose,
    NoExtraInfo,
    Combine,
    Eos,
}

impl MarkerKind {
    pub const ALL: [MarkerKind; 11] = [
        MarkerKind::PlanOpen,
        MarkerKind::PlanClose,
        MarkerKind::ParagraphOpen,
        MarkerKind::ParagraphClose,
        MarkerKind::FParagraphOpen,
        MarkerKind::FParagraphClose,
        MarkerKind::AnswerOpen,
        MarkerKind::AnswerClose,
        MarkerKind::NoExtraInfo,
        MarkerKind::Combine,
        MarkerKind::Eos,
    ];

    pub const fn literal(self) -> &'static str {
        match self {
            MarkerKind::PlanOpen => "<plan_start>",
            MarkerKind::PlanClose => "<plan_end>",
            MarkerKind::ParagraphOpen => "<paragraph>",
            MarkerKind::ParagraphClose => "</paragraph>",
            MarkerKind::FParagraphOpen => "<fparagraph>",
            MarkerKind::FParagraphClose => "</fparagraph>",
            MarkerKind::AnswerOpen => "<answer_start>",
            MarkerKind::AnswerClose => "<answer_end>",
            MarkerKind::NoExtraInfo => "<NOT_NEED_EXTRA_INFO>",
            MarkerKind::Combine => "[Combine]",
            MarkerKind::Eos => "<EOS>",
        }
    }

    pub fn from_literal(literal: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.literal() == literal)
    }

    /// The closing counterpart of an opening marker.
    pub const fn closer(self) -> Option<MarkerKind> {
        match self {
            MarkerKind::PlanOpen => Some(MarkerKind::PlanClose),
            MarkerKind::ParagraphOpen => Some(MarkerKind::ParagraphClose),
            MarkerKind::FParagraphOpen => Some(MarkerKind::FParagraphClose),
            MarkerKind::AnswerOpen => Some(MarkerKind::AnswerClose),
            _ => None,
        }
    }

    pub const fn is_closer(self) -> bool {
        matches!(
            self,
            MarkerKind::PlanClose
                | MarkerKind::ParagraphClose
                | MarkerKind::FParagraphClose
                | MarkerKind::AnswerClose
        )
    }

    pub const fn is_self_closing(self) -> bool {
        matches!(self, MarkerKind::NoExtraInfo | MarkerKind::Combine | MarkerKind::Eos)
    }
}

impl std::fmt::Display for MarkerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.literal())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("unbalanced {marker} at byte {offset}")]
    UnbalancedMarker { marker: MarkerKind, offset: usize },
    #[error("{found} at byte {offset} is out of order, expected {expected}")]
    OrderViolation {
        found: String,
        offset: usize,
        expected: &'static str,
    },
    #[error("unknown marker {token} at byte {offset}")]
    UnknownMarker { token: String, offset: usize },
    #[error("empty plan at byte {offset}")]
    EmptyPlan { offset: usize },
    #[error("trace invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TokenKind<'a> {
    Text(&'a str),
    Marker(MarkerKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Token<'a> {
    pub kind: TokenKind<'a>,
    /// Byte offset of the token start.
    pub offset: usize,
}

impl Token<'_> {
    fn describe(&self) -> String {
        match self.kind {
            TokenKind::Text(t) => format!("text {:?}", truncate(t, 24)),
            TokenKind::Marker(m) => m.literal().to_string(),
        }
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Length of an `<identifier>` or `</identifier>` token starting at `start`,
/// if one starts there.
fn angle_token_len(bytes: &[u8], start: usize) -> Option<usize> {
    let mut i = start + 1;
    if bytes.get(i) == Some(&b'/') {
        i += 1;
    }
    match bytes.get(i) {
        Some(b) if b.is_ascii_alphabetic() || *b == b'_' => {}
        _ => return None,
    }
    while let Some(b) = bytes.get(i) {
        if b.is_ascii_alphanumeric() || *b == b'_' {
            i += 1;
        } else {
            break;
        }
    }
    (bytes.get(i) == Some(&b'>')).then_some(i + 1 - start)
}

/// Splits `text` into text runs and markers.
pub(crate) fn lex(text: &str) -> Result<Vec<Token<'_>>, GrammarError> {
    let bytes = text.as_bytes();
    let combine = MarkerKind::Combine.literal();
    let mut tokens = Vec::new();
    let mut run_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let found = match bytes[i] {
            b'<' => match angle_token_len(bytes, i) {
                Some(len) => {
                    let literal = &text[i..i + len];
                    match MarkerKind::from_literal(literal) {
                        Some(kind) => Some((kind, len)),
                        None => {
                            return Err(GrammarError::UnknownMarker {
                                token: literal.to_string(),
                                offset: i,
                            })
                        }
                    }
                }
                None => None,
            },
            b'[' if text[i..].starts_with(combine) => Some((MarkerKind::Combine, combine.len())),
            _ => None,
        };
        match found {
            Some((kind, len)) => {
                if run_start < i {
                    tokens.push(Token {
                        kind: TokenKind::Text(&text[run_start..i]),
                        offset: run_start,
                    });
                }
                tokens.push(Token {
                    kind: TokenKind::Marker(kind),
                    offset: i,
                });
                i += len;
                run_start = i;
            }
            None => i += 1,
        }
    }
    if run_start < bytes.len() {
        tokens.push(Token {
            kind: TokenKind::Text(&text[run_start..]),
            offset: run_start,
        });
    }
    Ok(tokens)
}

/// True when `text` lexes as a single text run (contains no marker and no
/// unknown angle token).
pub fn is_plain_text(text: &str) -> bool {
    matches!(lex(text).as_deref(), Ok([]) | Ok([Token { kind: TokenKind::Text(_), .. }]))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Free text preceding this segment's `<plan_start>`.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub preamble: String,
    pub plan: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse_paragraph: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_paragraph: Option<String>,
    pub answer: String,
}

impl Segment {
    pub fn new(plan: impl Into<String>, answer: impl Into<String>) -> Self {
        Segment {
            plan: plan.into(),
            answer: answer.into(),
            ..Segment::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    IterationCap,
    PlanRepeat,
    /// The run stopped on a backend or grammar error.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub needs_retrieval: bool,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combine_answer: Option<String>,
    /// `None` for records that were not produced by an inference run.
    #[serde(default)]
    pub terminated_by: Option<Termination>,
}

impl GenerationTrace {
    pub fn no_extra_info(answer: impl Into<String>) -> Self {
        GenerationTrace {
            needs_retrieval: false,
            segments: vec![Segment {
                answer: answer.into(),
                ..Segment::default()
            }],
            combine_answer: None,
            terminated_by: None,
        }
    }

    /// Segment answers joined in order. A single space is inserted between
    /// two answers only when neither side already has whitespace at the seam.
    pub fn joined_answers(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            let seam_has_space = out.ends_with(char::is_whitespace)
                || seg.answer.starts_with(char::is_whitespace);
            if !out.is_empty() && !seg.answer.is_empty() && !seam_has_space {
                out.push(' ');
            }
            out.push_str(&seg.answer);
        }
        out
    }

    /// The answer to score: the `[Combine]` answer when present, otherwise
    /// the joined segment answers.
    pub fn final_answer(&self) -> String {
        match &self.combine_answer {
            Some(a) => a.clone(),
            None => self.joined_answers(),
        }
    }

    pub fn validate(&self) -> Result<(), GrammarError> {
        let bad = |msg: String| Err(GrammarError::InvariantViolation(msg));
        if !self.needs_retrieval {
            if self.segments.len() != 1 {
                return bad(format!(
                    "no-extra-info trace must have exactly one segment, found {}",
                    self.segments.len()
                ));
            }
            let seg = &self.segments[0];
            if !seg.plan.is_empty()
                || !seg.preamble.is_empty()
                || seg.coarse_paragraph.is_some()
                || seg.fine_paragraph.is_some()
            {
                return bad("no-extra-info segment may only carry an answer".into());
            }
            if self.combine_answer.is_some() {
                return bad("no-extra-info trace cannot carry a combine answer".into());
            }
            if !is_plain_text(&seg.answer) {
                return bad("answer payload contains markup".into());
            }
            return Ok(());
        }
        if self.segments.is_empty() {
            return bad("trace has no segments".into());
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.plan.is_empty() {
                return bad(format!("segment {i} has an empty plan"));
            }
            let fields = [
                ("preamble", Some(&seg.preamble)),
                ("plan", Some(&seg.plan)),
                ("paragraph", seg.coarse_paragraph.as_ref()),
                ("fparagraph", seg.fine_paragraph.as_ref()),
                ("answer", Some(&seg.answer)),
            ];
            for (name, value) in fields {
                if let Some(v) = value {
                    if !is_plain_text(v) {
                        return bad(format!("segment {i} {name} payload contains markup"));
                    }
                }
            }
        }
        if let Some(c) = &self.combine_answer {
            if !is_plain_text(c) {
                return bad("combine answer payload contains markup".into());
            }
        }
        Ok(())
    }
}

/// Renders a trace as markup. Inverse of [`parse_trace`].
pub fn serialize_trace(trace: &GenerationTrace) -> Result<String, GrammarError> {
    trace.validate()?;
    let mut out = String::new();
    if !trace.needs_retrieval {
        out.push_str(MarkerKind::NoExtraInfo.literal());
        out.push_str(&trace.segments[0].answer);
    } else {
        for seg in &trace.segments {
            out.push_str(&seg.preamble);
            wrap(&mut out, MarkerKind::PlanOpen, &seg.plan);
            if let Some(p) = &seg.coarse_paragraph {
                wrap(&mut out, MarkerKind::ParagraphOpen, p);
            }
            if let Some(p) = &seg.fine_paragraph {
                wrap(&mut out, MarkerKind::FParagraphOpen, p);
            }
            wrap(&mut out, MarkerKind::AnswerOpen, &seg.answer);
        }
        if let Some(c) = &trace.combine_answer {
            out.push_str(MarkerKind::Combine.literal());
            wrap(&mut out, MarkerKind::AnswerOpen, c);
        }
    }
    if trace.terminated_by == Some(Termination::Eos) {
        out.push_str(MarkerKind::Eos.literal());
    }
    Ok(out)
}

fn wrap(out: &mut String, open: MarkerKind, payload: &str) {
    out.push_str(open.literal());
    out.push_str(payload);
    // every opener passed here has a closer
    out.push_str(open.closer().map(MarkerKind::literal).unwrap_or_default());
}

struct Cursor<'a> {
    tokens: Vec<Token<'a>>,
    pos: usize,
    len: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<Token<'a>> {
        self.tokens.get(self.pos).copied()
    }

    fn peek_marker(&self) -> Option<MarkerKind> {
        match self.peek()?.kind {
            TokenKind::Marker(m) => Some(m),
            TokenKind::Text(_) => None,
        }
    }

    fn take_text(&mut self) -> &'a str {
        match self.peek() {
            Some(Token {
                kind: TokenKind::Text(t),
                ..
            }) => {
                self.pos += 1;
                t
            }
            _ => "",
        }
    }

    fn offset(&self) -> usize {
        self.peek().map_or(self.len, |t| t.offset)
    }

    /// Consumes `open`, a payload, and its closer.
    fn delimited(&mut self, open: MarkerKind) -> Result<&'a str, GrammarError> {
        let open_at = self.offset();
        self.pos += 1;
        let payload = self.take_text();
        let close = open.closer().expect("delimited called with an opener");
        match self.peek_marker() {
            Some(m) if m == close => {
                self.pos += 1;
                Ok(payload)
            }
            _ => Err(GrammarError::UnbalancedMarker {
                marker: open,
                offset: open_at,
            }),
        }
    }

    fn unexpected(&self, expected: &'static str) -> GrammarError {
        let tok = self.peek().expect("unexpected called at end of input");
        if let TokenKind::Marker(m) = tok.kind {
            if m.is_closer() {
                return GrammarError::UnbalancedMarker {
                    marker: m,
                    offset: tok.offset,
                };
            }
        }
        GrammarError::OrderViolation {
            found: tok.describe(),
            offset: tok.offset,
            expected,
        }
    }
}

/// Parses a complete markup record.
pub fn parse_trace(text: &str) -> Result<GenerationTrace, GrammarError> {
    let mut cur = Cursor {
        tokens: lex(text)?,
        pos: 0,
        len: text.len(),
    };

    if cur.peek_marker() == Some(MarkerKind::NoExtraInfo) {
        cur.pos += 1;
        let answer = cur.take_text().to_string();
        let terminated_by = finish(&mut cur)?;
        return Ok(GenerationTrace {
            terminated_by,
            ..GenerationTrace::no_extra_info(answer)
        });
    }

    let mut segments = Vec::new();
    let mut combine_answer = None;
    loop {
        let preamble_at = cur.offset();
        let preamble = cur.take_text();
        match cur.peek_marker() {
            Some(MarkerKind::PlanOpen) => {
                segments.push(parse_segment(&mut cur, preamble)?);
            }
            Some(MarkerKind::Combine) if !segments.is_empty() && preamble.is_empty() => {
                cur.pos += 1;
                if cur.peek_marker() != Some(MarkerKind::AnswerOpen) {
                    return Err(match cur.peek() {
                        Some(_) => cur.unexpected("<answer_start> after [Combine]"),
                        None => GrammarError::OrderViolation {
                            found: "end of input".into(),
                            offset: cur.len,
                            expected: "<answer_start> after [Combine]",
                        },
                    });
                }
                combine_answer = Some(cur.delimited(MarkerKind::AnswerOpen)?.to_string());
                break;
            }
            Some(MarkerKind::Eos) if !segments.is_empty() && preamble.is_empty() => break,
            None if !segments.is_empty() && preamble.is_empty() => break,
            None => {
                return Err(GrammarError::OrderViolation {
                    found: if preamble.is_empty() {
                        "end of input".into()
                    } else {
                        format!("text {:?}", truncate(preamble, 24))
                    },
                    offset: preamble_at,
                    expected: "<plan_start>",
                })
            }
            Some(_) if !preamble.is_empty() && !segments.is_empty() => {
                return Err(GrammarError::OrderViolation {
                    found: format!("text {:?}", truncate(preamble, 24)),
                    offset: preamble_at,
                    expected: "<plan_start>",
                })
            }
            Some(_) => return Err(cur.unexpected("<plan_start>")),
        }
    }
    let terminated_by = finish(&mut cur)?;
    Ok(GenerationTrace {
        needs_retrieval: true,
        segments,
        combine_answer,
        terminated_by,
    })
}

fn parse_segment(cur: &mut Cursor<'_>, preamble: &str) -> Result<Segment, GrammarError> {
    let plan_at = cur.offset();
    let plan = cur.delimited(MarkerKind::PlanOpen)?;
    if plan.is_empty() {
        return Err(GrammarError::EmptyPlan { offset: plan_at });
    }
    let mut seg = Segment {
        preamble: preamble.to_string(),
        plan: plan.to_string(),
        ..Segment::default()
    };
    if cur.peek_marker() == Some(MarkerKind::ParagraphOpen) {
        seg.coarse_paragraph = Some(cur.delimited(MarkerKind::ParagraphOpen)?.to_string());
    }
    if cur.peek_marker() == Some(MarkerKind::FParagraphOpen) {
        seg.fine_paragraph = Some(cur.delimited(MarkerKind::FParagraphOpen)?.to_string());
    }
    match cur.peek_marker() {
        Some(MarkerKind::AnswerOpen) => {
            seg.answer = cur.delimited(MarkerKind::AnswerOpen)?.to_string();
            Ok(seg)
        }
        _ if cur.peek().is_none() => Err(GrammarError::OrderViolation {
            found: "end of input".into(),
            offset: cur.len,
            expected: "<answer_start>",
        }),
        _ => Err(cur.unexpected("<answer_start>")),
    }
}

/// Accepts an optional trailing `<EOS>` followed by end of input.
fn finish(cur: &mut Cursor<'_>) -> Result<Option<Termination>, GrammarError> {
    let mut terminated_by = None;
    if cur.peek_marker() == Some(MarkerKind::Eos) {
        cur.pos += 1;
        terminated_by = Some(Termination::Eos);
    }
    match cur.peek() {
        None => Ok(terminated_by),
        Some(_) => Err(cur.unexpected("end of record")),
    }
}

/// Returns the contents of every inline `[Plan: ...]` tag, in order.
pub fn extract_intermediate_plans(text: &str) -> Vec<String> {
    const OPEN: &str = "[Plan:";
    let mut plans = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(OPEN) {
        let after = &rest[start + OPEN.len()..];
        match after.find(']') {
            Some(end) => {
                plans.push(after[..end].trim().to_string());
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    plans
}

/// What a plan-stage generation asked for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanOutput {
    Plan(String),
    NoExtraInfo,
    Eos,
    Combine,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnswerOutput {
    pub answer: String,
    pub combine: bool,
    pub eos: bool,
}

/// An answer generation that broke the grammar. `salvaged` is the answer
/// text before the offending token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedAnswer {
    pub salvaged: String,
    pub error: GrammarError,
}

/// Interprets the raw text of a plan-stage generation.
///
/// Accepts a bare plan or one wrapped in `<plan_start>`/`<plan_end>`; text
/// after `<plan_end>` is discarded as past the stop marker. `<EOS>` anywhere
/// ends the run.
pub fn parse_plan_output(text: &str) -> Result<PlanOutput, GrammarError> {
    let tokens = lex(text)?;
    if tokens
        .iter()
        .any(|t| t.kind == TokenKind::Marker(MarkerKind::Eos))
    {
        return Ok(PlanOutput::Eos);
    }
    let mut iter = tokens
        .iter()
        .filter(|t| !matches!(t.kind, TokenKind::Text(s) if s.trim().is_empty()))
        .peekable();
    match iter.peek().map(|t| t.kind) {
        Some(TokenKind::Marker(MarkerKind::NoExtraInfo)) => return Ok(PlanOutput::NoExtraInfo),
        Some(TokenKind::Marker(MarkerKind::Combine)) => return Ok(PlanOutput::Combine),
        Some(TokenKind::Marker(MarkerKind::PlanOpen)) => {
            iter.next();
        }
        _ => {}
    }
    let mut plan = String::new();
    for tok in iter {
        match tok.kind {
            TokenKind::Text(s) => plan.push_str(s),
            TokenKind::Marker(MarkerKind::PlanClose) => break,
            TokenKind::Marker(m) => {
                return Err(GrammarError::OrderViolation {
                    found: m.literal().to_string(),
                    offset: tok.offset,
                    expected: "plan text",
                })
            }
        }
    }
    let plan = plan.trim();
    if plan.is_empty() {
        return Err(GrammarError::EmptyPlan { offset: 0 });
    }
    Ok(PlanOutput::Plan(plan.to_string()))
}

/// Interprets the raw text of an answer-stage generation.
///
/// Accepts `[<answer_start>]ANSWER[<answer_end>][[Combine]][<EOS>]`. After
/// `<answer_end>` only `[Combine]` and `<EOS>` are read; anything else there
/// lies past the stop marker and is dropped.
pub fn parse_answer_output(text: &str) -> Result<AnswerOutput, MalformedAnswer> {
    let tokens = match lex(text) {
        Ok(t) => t,
        Err(error) => {
            let cut = match &error {
                GrammarError::UnknownMarker { offset, .. } => *offset,
                _ => 0,
            };
            return Err(MalformedAnswer {
                salvaged: strip_answer_open(&text[..cut]),
                error,
            });
        }
    };
    let mut out = AnswerOutput::default();
    let mut i = 0;
    if let Some(first) = tokens.first() {
        if first.kind == TokenKind::Marker(MarkerKind::AnswerOpen) {
            i = 1;
        }
    }
    let mut closed = false;
    while i < tokens.len() {
        let tok = tokens[i];
        match tok.kind {
            TokenKind::Text(s) if !closed => out.answer.push_str(s),
            TokenKind::Text(_) => {}
            TokenKind::Marker(MarkerKind::AnswerClose) if !closed => closed = true,
            TokenKind::Marker(MarkerKind::Combine) if !out.combine && !out.eos => {
                out.combine = true;
                closed = true;
            }
            TokenKind::Marker(MarkerKind::Eos) => {
                out.eos = true;
                break;
            }
            TokenKind::Marker(_) if closed => break,
            TokenKind::Marker(m) => {
                return Err(MalformedAnswer {
                    salvaged: out.answer,
                    error: GrammarError::OrderViolation {
                        found: m.literal().to_string(),
                        offset: tok.offset,
                        expected: "answer text",
                    },
                })
            }
        }
        i += 1;
    }
    Ok(out)
}

fn strip_answer_open(s: &str) -> String {
    s.strip_prefix(MarkerKind::AnswerOpen.literal())
        .unwrap_or(s)
        .to_string()
}
