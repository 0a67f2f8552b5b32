//! Text rendering of plan/answer requests for remote backends.
//!
//! Templates are plain text with `{instruction}`, `{x}`, `{e}`,
//! `{y_history}` and `{plan}` placeholders. Substitution is single-pass, so
//! braces inside substituted values are never re-expanded.

use crate::backend::{LmMode, LmRequest};
use crate::grammar::MarkerKind;

pub const DEFAULT_TEMPLATE_NAME: &str = "rpg_inference_v1";
pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/rpg_inference_v1.txt");

const PLAN_INSTRUCTION: &str = "Write the plan for the next answer segment. \
Reply <NOT_NEED_EXTRA_INFO> if the input can be answered without retrieved knowledge, \
or <EOS> if the answer is complete.";
const ANSWER_INSTRUCTION: &str = "Write the next answer segment for the plan, \
using the evidence when it is relevant.";
const COMBINE_INSTRUCTION: &str = "Summarize the previous segments into a concise final answer.";

/// Looks up a built-in template by name.
pub fn builtin_template(name: &str) -> Option<&'static str> {
    (name == DEFAULT_TEMPLATE_NAME).then_some(DEFAULT_TEMPLATE)
}

pub fn render(template: &str, request: &LmRequest) -> String {
    let plan = request.plan().unwrap_or("");
    let instruction = match request.mode {
        LmMode::Plan => PLAN_INSTRUCTION,
        LmMode::Answer if plan == MarkerKind::Combine.literal() => COMBINE_INSTRUCTION,
        LmMode::Answer => ANSWER_INSTRUCTION,
    };
    let history: String = request
        .history()
        .iter()
        .map(|turn| {
            format!(
                "{}{}{}{}{}{}",
                MarkerKind::PlanOpen,
                turn.plan,
                MarkerKind::PlanClose,
                MarkerKind::AnswerOpen,
                turn.answer,
                MarkerKind::AnswerClose
            )
        })
        .collect();
    fill(template, |name| match name {
        "instruction" => Some(instruction),
        "x" => Some(request.user_input().unwrap_or("")),
        "e" => Some(request.evidence().unwrap_or("")),
        "y_history" => Some(history.as_str()),
        "plan" => Some(plan),
        _ => None,
    })
}

/// Replaces `{name}` placeholders known to `lookup`; unknown ones are kept.
pub fn fill<'a>(template: &str, lookup: impl Fn(&str) -> Option<&'a str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_name(&after[..close]) => match lookup(&after[..close]) {
                Some(v) => {
                    out.push_str(v);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            },
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}
