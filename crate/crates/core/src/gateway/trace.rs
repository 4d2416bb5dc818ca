//! Splitting raw model output into reasoning and answer parts.

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delimiters {
    pub open: String,
    pub close: String,
}

impl Default for Delimiters {
    fn default() -> Self {
        Delimiters {
            open: "<think>".into(),
            close: "</think>".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTrace {
    pub reasoning: String,
    pub answer: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("empty response")]
    Empty,
    #[error("opening delimiter `{0}` without closing delimiter")]
    Unclosed(String),
}

/// Separate a reasoning block from the answer.
///
/// With a delimited block, the reasoning is the block interior and the answer
/// is whatever surrounds it. Output that only carries the closing delimiter
/// (the opening one was part of the prompt) is split at that delimiter.
/// Without delimiters, everything is answer.
pub fn parse_trace(raw: &str, d: &Delimiters) -> Result<ParsedTrace, TraceError> {
    if raw.trim().is_empty() {
        return Err(TraceError::Empty);
    }
    if let Some(start) = raw.find(&d.open) {
        let inner_start = start + d.open.len();
        let Some(rel_end) = raw[inner_start..].find(&d.close) else {
            return Err(TraceError::Unclosed(d.open.clone()));
        };
        let inner_end = inner_start + rel_end;
        let mut answer = raw[..start].trim().to_string();
        let tail = raw[inner_end + d.close.len()..].trim();
        if !answer.is_empty() && !tail.is_empty() {
            answer.push('\n');
        }
        answer.push_str(tail);
        return Ok(ParsedTrace {
            reasoning: raw[inner_start..inner_end].trim().to_string(),
            answer,
        });
    }
    if let Some(end) = raw.find(&d.close) {
        return Ok(ParsedTrace {
            reasoning: raw[..end].trim().to_string(),
            answer: raw[end + d.close.len()..].trim().to_string(),
        });
    }
    Ok(ParsedTrace {
        reasoning: String::new(),
        answer: raw.trim().to_string(),
    })
}

fn final_answer_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)final\s+answer\s*[:：]|最终答案\s*[:：]").unwrap())
}

/// Text before and after the last "Final Answer:" marker, if present.
pub fn split_final_answer(text: &str) -> Option<(&str, &str)> {
    let m = final_answer_re().find_iter(text).last()?;
    Some((text[..m.start()].trim(), text[m.end()..].trim()))
}

/// The stated final answer, or the whole text when no marker is present.
pub fn final_answer(text: &str) -> String {
    match split_final_answer(text) {
        Some((_, after)) if !after.is_empty() => after.to_string(),
        _ => text.trim().to_string(),
    }
}

/// Reasoning and answer of a solution-style response.
///
/// The reasoning is the delimited block when present, otherwise the text
/// before the final-answer marker. Returns `None` when either part is
/// missing.
pub fn solution_parts(reasoning: &str, answer_text: &str) -> Option<(String, String)> {
    if !reasoning.trim().is_empty() {
        let ans = final_answer(answer_text);
        return (!ans.is_empty()).then(|| (reasoning.trim().to_string(), ans));
    }
    let (before, after) = split_final_answer(answer_text)?;
    if before.is_empty() || after.is_empty() {
        return None;
    }
    Some((before.to_string(), after.to_string()))
}

/// Text following the last `label:` marker (case-insensitive), up to the
/// end of that line.
pub fn labeled_line(text: &str, label: &str) -> Option<String> {
    let re = Regex::new(&format!(r"(?im)^\s*\**{}\**\s*[:：]\s*(.*)$", regex::escape(label))).ok()?;
    re.captures_iter(text)
        .last()
        .map(|c| c[1].trim().trim_matches('*').trim().to_string())
        .filter(|s| !s.is_empty())
}

/// The last whole-word occurrence of any of `tokens` (case-sensitive).
pub fn parse_verdict<'a>(text: &str, tokens: &[&'a str]) -> Option<&'a str> {
    let mut sorted: Vec<&'a str> = tokens.to_vec();
    sorted.sort_by_key(|t| std::cmp::Reverse(t.len()));
    let alt = sorted
        .iter()
        .map(|t| regex::escape(t))
        .collect::<Vec<_>>()
        .join("|");
    let re = Regex::new(&format!(r"\b(?:{alt})\b")).ok()?;
    let m = re.find_iter(text).last()?;
    sorted.into_iter().find(|t| *t == m.as_str())
}
