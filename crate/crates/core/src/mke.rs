//! Multi-perspective knowledge extraction.
//!
//! Three expansions of the seed corpus:
//! - Q2A keeps well-formed, deduplicated seed pairs.
//! - A2Q perturbs a gold answer, writes a question for the perturbed answer
//!   and keeps the new pair only if three independent checks all pass.
//! - T2Q summarizes a reasoning trace, lists its key processes and writes
//!   one standalone pair per key process.

use futures::future::join_all;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::AuditRecord;
use crate::corpus::dedupe;
use crate::gateway::trace::{labeled_line, parse_verdict};
use crate::gateway::{Gateway, GatewayError, LengthDirective, ModelRequest, SamplingParams};
use crate::model::{qa_violations, Provenance, QaPair, UnannotatedSample};
use crate::sampler::sample_cots;
use crate::template::{PromptTemplate, RenderedPrompt, TemplateName, TemplateSet};
use crate::text::char_len;

const STAGE: &str = "mke";

pub const DEFAULT_T2Q_MIN_TRACE_CHARS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MkeError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("malformed response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MkeConfig {
    pub a2q: bool,
    pub t2q: bool,
    pub t2q_min_trace_chars: usize,
    /// Upper bound on pairs mined from one trace; unbounded when absent.
    pub t2q_max_pairs: Option<usize>,
    pub sampling: SamplingParams,
}

impl Default for MkeConfig {
    fn default() -> Self {
        MkeConfig {
            a2q: true,
            t2q: true,
            t2q_min_trace_chars: DEFAULT_T2Q_MIN_TRACE_CHARS,
            t2q_max_pairs: None,
            sampling: SamplingParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Q2aOutcome {
    pub kept: Vec<QaPair>,
    pub dropped: Vec<(QaPair, String)>,
}

/// Well-formedness filter, then dedupe; survivors are tagged Q2A.
pub fn q2a_curate(pairs: Vec<QaPair>) -> Q2aOutcome {
    let mut out = Q2aOutcome::default();
    let mut wellformed = Vec::with_capacity(pairs.len());
    for p in pairs {
        let v = qa_violations(&p);
        if v.is_empty() {
            wellformed.push(p);
        } else {
            let reason = v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            out.dropped.push((p, reason));
        }
    }
    let d = dedupe(wellformed);
    out.dropped
        .extend(d.dropped.into_iter().map(|p| (p, "duplicate question".to_string())));
    out.kept = d
        .kept
        .into_iter()
        .map(|mut p| {
            p.provenance = Provenance::Q2a;
            p
        })
        .collect();
    out
}

/// A named answer-perturbation prompt. Prompts take `{question}` and
/// `{answer}` and reply with a `Perturbed Answer:` line.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub name: String,
    pub template: PromptTemplate,
}

impl Perturbation {
    /// Semantic negation and contextual antonym substitution.
    pub fn builtin(templates: &TemplateSet) -> Vec<Perturbation> {
        vec![
            Perturbation {
                name: "negation".into(),
                template: templates.get(TemplateName::A2qNegation).clone(),
            },
            Perturbation {
                name: "antonym".into(),
                template: templates.get(TemplateName::A2qAntonym).clone(),
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct A2qChecks {
    pub semantic_coherence: bool,
    pub logical_consistency: bool,
    pub answer_faithfulness: bool,
}

impl A2qChecks {
    pub fn all_pass(&self) -> bool {
        self.semantic_coherence && self.logical_consistency && self.answer_faithfulness
    }

    fn failed(&self) -> Vec<&'static str> {
        [
            ("semantic_coherence", self.semantic_coherence),
            ("logical_consistency", self.logical_consistency),
            ("answer_faithfulness", self.answer_faithfulness),
        ]
        .into_iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| n)
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2qCandidate {
    pub strategy: String,
    pub perturbed_answer: String,
    pub generated_question: String,
    pub checks: A2qChecks,
}

impl A2qCandidate {
    pub fn accepted(&self) -> bool {
        self.checks.all_pass()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct A2qOutcome {
    pub pairs: Vec<QaPair>,
    pub candidates: Vec<A2qCandidate>,
    pub audit: Vec<AuditRecord>,
}

async fn ask(
    backend: &Gateway,
    prompt: RenderedPrompt,
    sampling: SamplingParams,
) -> Result<String, GatewayError> {
    let req = ModelRequest::new(prompt)
        .sampling(sampling)
        .directive(LengthDirective::Long);
    Ok(backend.complete(&req).await?.answer_text)
}

fn render(
    t: &PromptTemplate,
    vars: &[(&str, &str)],
) -> Result<RenderedPrompt, MkeError> {
    t.render(vars).map_err(|e| MkeError::Precondition(e.to_string()))
}

async fn check(
    name: TemplateName,
    question: &str,
    answer: &str,
    verifier: &Gateway,
    templates: &TemplateSet,
) -> Result<bool, MkeError> {
    let prompt = render(templates.get(name), &[("question", question), ("answer", answer)])?;
    let zero = SamplingParams {
        temperature: 0.0,
        ..SamplingParams::default()
    };
    let text = ask(verifier, prompt, zero).await?;
    match parse_verdict(&text, &["YES", "NO"]) {
        Some("YES") => Ok(true),
        Some(_) => Ok(false),
        None => Err(MkeError::Malformed(format!("{name} reply carries no YES/NO verdict"))),
    }
}

async fn a2q_candidate(
    pair: &QaPair,
    p: &Perturbation,
    sampling: SamplingParams,
    generator: &Gateway,
    verifier: &Gateway,
    templates: &TemplateSet,
) -> Result<A2qCandidate, MkeError> {
    let prompt = render(
        &p.template,
        &[("question", &pair.question), ("answer", &pair.gold_answer)],
    )?;
    let text = ask(generator, prompt, sampling).await?;
    let perturbed = labeled_line(&text, "Perturbed Answer")
        .ok_or_else(|| MkeError::Malformed("no `Perturbed Answer:` line".into()))?;

    let prompt = render(
        templates.get(TemplateName::A2qQuestion),
        &[("question", &pair.question), ("answer", &perturbed)],
    )?;
    let text = ask(generator, prompt, sampling).await?;
    let question = labeled_line(&text, "Question")
        .ok_or_else(|| MkeError::Malformed("no `Question:` line".into()))?;

    let [c, l, f] = [
        TemplateName::A2qCoherence,
        TemplateName::A2qConsistency,
        TemplateName::A2qFaithfulness,
    ]
    .map(|n| check(n, &question, &perturbed, verifier, templates));
    let (c, l, f) = futures::join!(c, l, f);
    Ok(A2qCandidate {
        strategy: p.name.clone(),
        perturbed_answer: perturbed,
        generated_question: question,
        checks: A2qChecks {
            semantic_coherence: c?,
            logical_consistency: l?,
            answer_faithfulness: f?,
        },
    })
}

/// Counterfactual pairs for one seed pair, one candidate per perturbation.
/// Candidates that fail any check, or whose calls fail, are skipped with an
/// audit record.
pub async fn a2q_augment(
    pair: &QaPair,
    perturbations: &[Perturbation],
    sampling: SamplingParams,
    generator: &Gateway,
    verifier: &Gateway,
    templates: &TemplateSet,
) -> Result<A2qOutcome, MkeError> {
    let v = qa_violations(pair);
    if !v.is_empty() {
        return Err(MkeError::Precondition(format!("pair {} is invalid", pair.id)));
    }
    let results = join_all(
        perturbations
            .iter()
            .map(|p| a2q_candidate(pair, p, sampling, generator, verifier, templates)),
    )
    .await;
    let mut out = A2qOutcome::default();
    for (p, r) in perturbations.iter().zip(results) {
        let item = format!("{}#a2q-{}", pair.id, p.name);
        match r {
            Ok(cand) if cand.accepted() => {
                let qa = QaPair {
                    id: item,
                    question: cand.generated_question.clone(),
                    gold_answer: cand.perturbed_answer.clone(),
                    source: pair.source.clone(),
                    provenance: Provenance::A2q,
                    language: pair.language,
                };
                if qa_violations(&qa).is_empty() {
                    out.pairs.push(qa);
                }
                out.candidates.push(cand);
            }
            Ok(cand) => {
                out.audit.push(
                    AuditRecord::new(STAGE, item, "a2q_rejected", cand.checks.failed().join(","))
                        .with_detail(serde_json::to_value(&cand).unwrap_or_default()),
                );
                out.candidates.push(cand);
            }
            Err(e) => out
                .audit
                .push(AuditRecord::new(STAGE, item, "a2q_failed", e.to_string())),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct T2qExtraction {
    pub summary: String,
    pub key_points: Vec<String>,
    pub qa_pairs: Vec<QaPair>,
}

/// Bulleted or numbered lines of a key-point reply; `NONE` means no points.
pub fn parse_key_points(text: &str) -> Vec<String> {
    if text.trim().eq_ignore_ascii_case("none") {
        return Vec::new();
    }
    text.lines()
        .filter_map(|l| {
            let l = l.trim();
            let rest = l
                .strip_prefix("- ")
                .or_else(|| l.strip_prefix("* "))
                .or_else(|| l.strip_prefix("• "))
                .or_else(|| {
                    let digits = l.find(|c: char| !c.is_ascii_digit())?;
                    (digits > 0)
                        .then(|| l[digits..].strip_prefix(". ").or_else(|| l[digits..].strip_prefix(") ")))
                        .flatten()
                })?;
            let rest = rest.trim();
            (!rest.is_empty()).then(|| rest.to_string())
        })
        .collect()
}

/// Mine standalone pairs from a sample's reasoning. Pairs that cannot be
/// parsed are skipped and reported in the returned audit records.
pub async fn t2q_mine(
    sample: &UnannotatedSample,
    max_pairs: Option<usize>,
    sampling: SamplingParams,
    backend: &Gateway,
    templates: &TemplateSet,
) -> Result<(T2qExtraction, Vec<AuditRecord>), MkeError> {
    if sample.solution.trace.is_empty() {
        return Err(MkeError::Precondition("sample trace is empty".into()));
    }
    let qa = &sample.qa;
    let trace = sample.solution.trace.rendered();
    let prompt = render(
        templates.get(TemplateName::T2qSummarize),
        &[("question", &qa.question), ("trace", &trace)],
    )?;
    let summary = ask(backend, prompt, sampling).await?.trim().to_string();

    let prompt = render(
        templates.get(TemplateName::T2qKeyPoints),
        &[("question", &qa.question), ("summary", &summary), ("trace", &trace)],
    )?;
    let mut key_points = parse_key_points(&ask(backend, prompt, sampling).await?);
    if let Some(cap) = max_pairs {
        key_points.truncate(cap);
    }

    let mut prompts = Vec::with_capacity(key_points.len());
    for point in &key_points {
        prompts.push(render(
            templates.get(TemplateName::T2qQa),
            &[("point", point), ("summary", &summary)],
        )?);
    }
    let replies = join_all(prompts.into_iter().map(|p| ask(backend, p, sampling))).await;

    let mut audit = Vec::new();
    let mut qa_pairs = Vec::new();
    for (k, reply) in replies.into_iter().enumerate() {
        let id = format!("{}#t2q-{k}", qa.id);
        let parsed = reply.map_err(|e| e.to_string()).and_then(|text| {
            match (labeled_line(&text, "Question"), labeled_line(&text, "Answer")) {
                (Some(q), Some(a)) => Ok((q, a)),
                _ => Err("reply lacks `Question:` or `Answer:` line".to_string()),
            }
        });
        match parsed {
            Ok((question, answer)) => {
                let pair = QaPair {
                    id,
                    question,
                    gold_answer: answer,
                    source: qa.id.clone(),
                    provenance: Provenance::T2q,
                    language: qa.language,
                };
                if qa_violations(&pair).is_empty() {
                    qa_pairs.push(pair);
                }
            }
            Err(cause) => audit.push(AuditRecord::new(STAGE, id, "t2q_failed", cause)),
        }
    }
    Ok((
        T2qExtraction {
            summary,
            key_points,
            qa_pairs,
        },
        audit,
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MkeCounts {
    pub q2a: usize,
    pub a2q: usize,
    pub t2q: usize,
    /// Mined pairs that duplicated an earlier question.
    pub merged_duplicates: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MkeOutput {
    pub pairs: Vec<QaPair>,
    pub dropped: Vec<(QaPair, String)>,
    pub audit: Vec<AuditRecord>,
    pub counts: MkeCounts,
}

/// The whole stage: Q2A, then A2Q and T2Q per curated pair, then the
/// deduplicated union in input order.
///
/// T2Q traces come from one LONG generation per pair; traces shorter than
/// `t2q_min_trace_chars` are not mined.
pub async fn run_mke(
    seed_pairs: Vec<QaPair>,
    cfg: &MkeConfig,
    concurrency: usize,
    generator: &Gateway,
    verifier: &Gateway,
    templates: &TemplateSet,
) -> MkeOutput {
    let curated = q2a_curate(seed_pairs);
    let perturbations = Perturbation::builtin(templates);
    let mut out = MkeOutput {
        dropped: curated.dropped,
        ..MkeOutput::default()
    };
    out.counts.q2a = curated.kept.len();

    let per_pair = futures::stream::iter(curated.kept.iter().map(|pair| {
        let perturbations = &perturbations;
        async move {
            let mut mined = Vec::new();
            let mut audit = Vec::new();
            if cfg.a2q {
                match a2q_augment(pair, perturbations, cfg.sampling, generator, verifier, templates).await {
                    Ok(a) => {
                        mined.extend(a.pairs);
                        audit.extend(a.audit);
                    }
                    Err(e) => audit.push(AuditRecord::new(STAGE, &pair.id, "a2q_failed", e.to_string())),
                }
            }
            let mut t2q = Vec::new();
            if cfg.t2q {
                match t2q_for_pair(pair, cfg, generator, templates).await {
                    Ok((pairs, a)) => {
                        t2q = pairs;
                        audit.extend(a);
                    }
                    Err(e) => audit.push(AuditRecord::new(STAGE, &pair.id, "t2q_failed", e.to_string())),
                }
            }
            (mined, t2q, audit)
        }
    }))
    .buffered(concurrency.max(1))
    .collect::<Vec<_>>()
    .await;

    let mut union = curated.kept;
    for (a2q, t2q, audit) in per_pair {
        out.counts.a2q += a2q.len();
        out.counts.t2q += t2q.len();
        union.extend(a2q);
        union.extend(t2q);
        out.audit.extend(audit);
    }
    let d = dedupe(union);
    out.counts.merged_duplicates = d.dropped.len();
    out.dropped
        .extend(d.dropped.into_iter().map(|p| (p, "duplicate question".to_string())));
    out.pairs = d.kept;
    out
}

async fn t2q_for_pair(
    pair: &QaPair,
    cfg: &MkeConfig,
    generator: &Gateway,
    templates: &TemplateSet,
) -> Result<(Vec<QaPair>, Vec<AuditRecord>), MkeError> {
    let sampled = sample_cots(pair, 1, LengthDirective::Long, cfg.sampling, generator, templates)
        .await
        .map_err(|e| MkeError::Malformed(e.to_string()))?;
    let Some(c) = sampled.set.candidates.into_iter().next() else {
        return Ok((Vec::new(), sampled.audit));
    };
    if char_len(&c.trace.concatenated()) < cfg.t2q_min_trace_chars {
        return Ok((Vec::new(), sampled.audit));
    }
    let sample = UnannotatedSample {
        qa: pair.clone(),
        solution: crate::model::Solution {
            trace: c.trace,
            final_answer: c.answer,
        },
    };
    let (ext, mut audit) = t2q_mine(&sample, cfg.t2q_max_pairs, cfg.sampling, generator, templates).await?;
    audit.splice(0..0, sampled.audit);
    Ok((ext.qa_pairs, audit))
}
