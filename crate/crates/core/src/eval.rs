//! Evaluation harness: rule-based and judge grading, pass@1, difficulty
//! and task splits, and a benchmark runner.

use std::collections::BTreeMap;

use async_trait::async_trait;
use futures::future::join_all;
use futures::StreamExt;
use rand::seq::index::sample as sample_indices;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::trace::{parse_trace, parse_verdict, Delimiters};
use crate::gateway::{Gateway, ModelRequest, SamplingParams};
use crate::model::{QaPair, Sample};
use crate::sampler::{item_rng, sample_cots, verify_answer};
use crate::template::{TemplateName, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    MultipleChoice,
    TrueFalse,
    /// Free-form; graded by the judge backend.
    Open,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("no label could be extracted from the response")]
    Unextractable,
    #[error("gold `{0}` is not a canonical label")]
    InvalidGold(String),
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("empty input")]
    EmptyInput,
    #[error("insufficient data: {0}")]
    Insufficient(String),
}

fn cue_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)(?:answer|final|choice|option|答案|选项|选择|选)(?:\s+is)?\s*[:：是为]?\s*[\(（\[]?([a-j])(?:[\)）\]])?",
        )
        .unwrap()
    })
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(|c| c.is_ascii_alphanumeric())
}

/// The last stated choice letter, A to J.
///
/// Prefers labels introduced by a cue word ("answer is B", "Final: B",
/// "答案：B"); otherwise the last standalone capital letter. A lowercase
/// letter after a cue only counts at the end of a sentence, so "the answer
/// is a bond" yields nothing.
pub fn extract_choice(response: &str) -> Option<char> {
    let mut cued = None;
    for c in cue_re().captures_iter(response) {
        let m = c.get(1).unwrap();
        let letter = m.as_str().chars().next().unwrap();
        let whole = c.get(0).unwrap();
        let next = response[whole.end()..].chars().next();
        if is_word_char(next) && whole.end() == m.end() {
            continue;
        }
        if letter.is_ascii_lowercase() && next.is_some_and(char::is_whitespace) && whole.end() == m.end() {
            continue;
        }
        cued = Some(letter.to_ascii_uppercase());
    }
    if cued.is_some() {
        return cued;
    }
    let chars: Vec<char> = response.chars().collect();
    let mut last = None;
    for (i, &c) in chars.iter().enumerate() {
        if !('A'..='J').contains(&c) {
            continue;
        }
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        if is_word_char(prev) || is_word_char(next) {
            continue;
        }
        // "A" and "I" followed by a word are an article and a pronoun.
        if matches!(c, 'A' | 'I')
            && next == Some(' ')
            && chars.get(i + 2).is_some_and(|n| n.is_ascii_lowercase())
        {
            continue;
        }
        last = Some(c);
    }
    last
}

fn truth_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:true|false|yes|no|incorrect|correct)\b|不正确|正确|错误|不对|对|错").unwrap()
    })
}

/// Map a truth token to its value.
pub fn truth_value(token: &str) -> Option<bool> {
    match token.trim().to_lowercase().as_str() {
        "true" | "yes" | "correct" | "t" | "正确" | "对" => Some(true),
        "false" | "no" | "incorrect" | "f" | "不正确" | "错误" | "不对" | "错" => Some(false),
        _ => None,
    }
}

pub fn extract_truth(response: &str) -> Option<bool> {
    truth_re()
        .find_iter(response)
        .last()
        .and_then(|m| truth_value(m.as_str()))
}

/// Compare the final stated label in `response` with `gold`.
pub fn grade_rule_based(response: &str, gold: &str, kind: QuestionKind) -> Result<bool, EvalError> {
    match kind {
        QuestionKind::MultipleChoice => {
            let g = gold.trim();
            let gold_letter = match g.chars().collect::<Vec<_>>()[..] {
                [c] if c.is_ascii_alphabetic() && ('A'..='J').contains(&c.to_ascii_uppercase()) => {
                    c.to_ascii_uppercase()
                }
                _ => return Err(EvalError::InvalidGold(gold.to_string())),
            };
            extract_choice(response)
                .map(|c| c == gold_letter)
                .ok_or(EvalError::Unextractable)
        }
        QuestionKind::TrueFalse => {
            let g = truth_value(gold).ok_or_else(|| EvalError::InvalidGold(gold.to_string()))?;
            extract_truth(response)
                .map(|v| v == g)
                .ok_or(EvalError::Unextractable)
        }
        QuestionKind::Open => Err(EvalError::InvalidGold(
            "open questions need the judge".into(),
        )),
    }
}

/// Ask the judge backend whether `prediction` matches `gold`.
pub async fn grade_judge(
    question: &str,
    gold: &str,
    prediction: &str,
    judge: &Gateway,
    templates: &TemplateSet,
) -> Result<bool, EvalError> {
    if [question, gold, prediction].iter().any(|s| s.trim().is_empty()) {
        return Err(EvalError::EmptyInput);
    }
    let prompt = templates
        .render(
            TemplateName::Judge,
            &[("question", question), ("gold", gold), ("prediction", prediction)],
        )
        .map_err(|e| EvalError::JudgeUnavailable(e.to_string()))?;
    let req = ModelRequest::new(prompt).sampling(SamplingParams {
        temperature: 0.0,
        ..SamplingParams::default()
    });
    let resp = judge
        .complete(&req)
        .await
        .map_err(|e| EvalError::JudgeUnavailable(e.to_string()))?;
    match parse_verdict(&resp.answer_text, &["CORRECT", "INCORRECT"]) {
        Some("CORRECT") => Ok(true),
        Some(_) => Ok(false),
        None => Err(EvalError::JudgeUnavailable("reply carries no verdict".into())),
    }
}

/// Mean over queries of the fraction of correct responses.
pub fn pass_at_1(per_query: &[Vec<bool>]) -> Result<f64, EvalError> {
    if per_query.is_empty() || per_query.iter().any(Vec::is_empty) {
        return Err(EvalError::EmptyInput);
    }
    let sum: f64 = per_query
        .iter()
        .map(|q| q.iter().filter(|&&c| c).count() as f64 / q.len() as f64)
        .sum();
    Ok(sum / per_query.len() as f64)
}

#[async_trait]
pub trait CorrectnessLabeler: Send + Sync {
    async fn is_correct(&self, qa: &QaPair) -> Result<bool, String>;
}

/// Labels a pair by generating one answer and verifying it against gold.
pub struct ModelLabeler<'a> {
    pub generator: &'a Gateway,
    pub matcher: &'a Gateway,
    pub templates: &'a TemplateSet,
}

#[async_trait]
impl CorrectnessLabeler for ModelLabeler<'_> {
    async fn is_correct(&self, qa: &QaPair) -> Result<bool, String> {
        let s = sample_cots(
            qa,
            1,
            crate::gateway::LengthDirective::Long,
            SamplingParams::default(),
            self.generator,
            self.templates,
        )
        .await
        .map_err(|e| e.to_string())?;
        let answer = &s.set.candidates[0].answer;
        verify_answer(answer, &qa.gold_answer, self.matcher, self.templates)
            .await
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DifficultySplit {
    pub simple: Vec<QaPair>,
    pub hard: Vec<QaPair>,
    /// Pairs the labeler could not label.
    pub unlabeled: Vec<QaPair>,
}

fn subsample<T: Clone>(items: &[T], k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<T> {
    let mut idx = sample_indices(rng, items.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Equal-sized simple and hard subsets, each of
/// `min(|simple|, |hard|, n_samples)` pairs, subsampled with `seed` and
/// kept in input order.
pub async fn split_difficulty(
    pairs: &[QaPair],
    labeler: &dyn CorrectnessLabeler,
    n_samples: usize,
    seed: u64,
) -> Result<DifficultySplit, EvalError> {
    let labels = join_all(pairs.iter().map(|p| labeler.is_correct(p))).await;
    let mut simple = Vec::new();
    let mut hard = Vec::new();
    let mut unlabeled = Vec::new();
    for (p, l) in pairs.iter().zip(labels) {
        match l {
            Ok(true) => simple.push(p.clone()),
            Ok(false) => hard.push(p.clone()),
            Err(_) => unlabeled.push(p.clone()),
        }
    }
    if simple.is_empty() || hard.is_empty() {
        return Err(EvalError::Insufficient(format!(
            "{} simple and {} hard pairs",
            simple.len(),
            hard.len()
        )));
    }
    let k = simple.len().min(hard.len()).min(n_samples);
    let mut rng = item_rng(seed, "difficulty");
    Ok(DifficultySplit {
        simple: subsample(&simple, k, &mut rng),
        hard: subsample(&hard, k, &mut rng),
        unlabeled,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskGroup {
    pub train: Vec<Sample>,
    pub held_out: Vec<Sample>,
}

pub const DEFAULT_HELD_OUT: f64 = 0.1;

/// Group by level-1 task label, holding out `round(frac * n)` samples of
/// each group chosen with `seed`.
pub fn split_task(samples: &[Sample], held_out_frac: f64, seed: u64) -> BTreeMap<String, TaskGroup> {
    let mut groups: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        let label = s.metadata.task_domain().unwrap_or_default().to_string();
        groups.entry(label).or_default().push(s.clone());
    }
    groups
        .into_iter()
        .map(|(label, members)| {
            let k = ((held_out_frac.clamp(0.0, 1.0) * members.len() as f64).round() as usize)
                .min(members.len());
            let mut rng = item_rng(seed, &label);
            let mut chosen = vec![false; members.len()];
            for i in sample_indices(&mut rng, members.len(), k) {
                chosen[i] = true;
            }
            let mut g = TaskGroup::default();
            for (s, held) in members.into_iter().zip(chosen) {
                if held {
                    g.held_out.push(s);
                } else {
                    g.train.push(s);
                }
            }
            (label, g)
        })
        .collect()
}

/// One benchmark line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub question: String,
    pub gold: String,
    pub kind: QuestionKind,
    /// Pre-computed model responses; generated with the candidate backend
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    Unextractable,
    Ungraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub index: usize,
    pub kind: QuestionKind,
    pub verdicts: Vec<Verdict>,
    pub response_lengths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub items: usize,
    pub responses: usize,
    pub pass_at_1: f64,
    pub avg_response_len: f64,
    pub unextractable: usize,
    pub ungraded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Responses generated per query when a line carries none.
    pub responses_per_query: u32,
    /// Drop judge failures from the denominator instead of counting them
    /// as incorrect.
    pub exclude_ungraded: bool,
    pub held_out_fraction: f64,
    pub sampling: SamplingParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            responses_per_query: 1,
            exclude_ungraded: false,
            held_out_fraction: DEFAULT_HELD_OUT,
            sampling: SamplingParams::default(),
        }
    }
}

fn visible_answer(response: &str) -> String {
    match parse_trace(response, &Delimiters::default()) {
        Ok(p) => p.answer,
        Err(_) => response.to_string(),
    }
}

async fn responses_for(
    item: &BenchmarkItem,
    cfg: &EvalConfig,
    candidate: Option<&Gateway>,
    templates: &TemplateSet,
) -> Result<Vec<String>, String> {
    if let Some(r) = &item.responses {
        return Ok(r.clone());
    }
    let gw = candidate.ok_or("no responses given and no candidate backend configured")?;
    let prompt = templates
        .render(TemplateName::Generate, &[("question", &item.question)])
        .map_err(|e| e.to_string())?;
    let base = ModelRequest::new(prompt).sampling(cfg.sampling);
    let calls = (0..cfg.responses_per_query).map(|i| {
        let req = base.clone().sample_index(i);
        async move { gw.complete(&req).await }
    });
    join_all(calls)
        .await
        .into_iter()
        .map(|r| r.map(|resp| resp.raw).map_err(|e| e.to_string()))
        .collect()
}

/// Grade every item and aggregate. Responses that fail to generate count
/// as ungraded.
pub async fn run_benchmark(
    items: &[BenchmarkItem],
    cfg: &EvalConfig,
    candidate: Option<&Gateway>,
    judge: Option<&Gateway>,
    templates: &TemplateSet,
    length_fn: &(dyn Fn(&str) -> usize + Sync),
    concurrency: usize,
) -> Result<(Vec<ItemResult>, EvalSummary), EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let results: Vec<ItemResult> = futures::stream::iter(items.iter().enumerate().map(|(index, item)| async move {
        let responses = match responses_for(item, cfg, candidate, templates).await {
            Ok(r) if !r.is_empty() => r,
            _ => {
                return ItemResult {
                    index,
                    kind: item.kind,
                    verdicts: vec![Verdict::Ungraded],
                    response_lengths: Vec::new(),
                }
            }
        };
        let verdicts = join_all(responses.iter().map(|resp| async move {
            let answer = visible_answer(resp);
            let graded = match item.kind {
                QuestionKind::Open => match judge {
                    Some(j) => grade_judge(&item.question, &item.gold, &answer, j, templates).await,
                    None => Err(EvalError::JudgeUnavailable("no judge backend configured".into())),
                },
                kind => grade_rule_based(&answer, &item.gold, kind),
            };
            match graded {
                Ok(true) => Verdict::Correct,
                Ok(false) => Verdict::Incorrect,
                Err(EvalError::Unextractable) => Verdict::Unextractable,
                Err(_) => Verdict::Ungraded,
            }
        }))
        .await;
        ItemResult {
            index,
            kind: item.kind,
            verdicts,
            response_lengths: responses.iter().map(|r| length_fn(r)).collect(),
        }
    }))
    .buffered(concurrency.max(1))
    .collect()
    .await;

    let mut per_query = Vec::new();
    let (mut unextractable, mut ungraded, mut n_resp, mut len_sum) = (0, 0, 0, 0usize);
    for r in &results {
        let mut q = Vec::new();
        for v in &r.verdicts {
            match v {
                Verdict::Correct => q.push(true),
                Verdict::Incorrect => q.push(false),
                Verdict::Unextractable => {
                    unextractable += 1;
                    q.push(false);
                }
                Verdict::Ungraded => {
                    ungraded += 1;
                    if !cfg.exclude_ungraded {
                        q.push(false);
                    }
                }
            }
        }
        n_resp += r.response_lengths.len();
        len_sum += r.response_lengths.iter().sum::<usize>();
        if !q.is_empty() {
            per_query.push(q);
        }
    }
    let summary = EvalSummary {
        items: items.len(),
        responses: n_resp,
        pass_at_1: pass_at_1(&per_query)?,
        avg_response_len: if n_resp == 0 { 0.0 } else { len_sum as f64 / n_resp as f64 },
        unextractable,
        ungraded,
    };
    Ok((results, summary))
}
