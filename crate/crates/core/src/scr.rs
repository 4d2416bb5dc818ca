//! Self-corrective rewriting: turn a pair whose sampled answers all failed
//! verification into a verified, extended trace through repeated
//! reflect/rewrite rounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::trace::solution_parts;
use crate::gateway::{Gateway, GatewayError, LengthDirective, ModelRequest, SamplingParams};
use crate::model::{CotTrace, QaPair, SegmentKind, Solution, UnannotatedSample};
use crate::sampler::{normalize_answer, verify_answer};
use crate::template::{TemplateName, TemplateSet};

pub const DEFAULT_LIMIT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScrConfig {
    pub enabled: bool,
    pub limit: u32,
    pub directive: LengthDirective,
    pub sampling: SamplingParams,
}

impl Default for ScrConfig {
    fn default() -> Self {
        ScrConfig {
            enabled: true,
            limit: DEFAULT_LIMIT,
            directive: LengthDirective::Long,
            sampling: SamplingParams::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScrError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("malformed response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScrStatus {
    Running,
    Succeeded,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrIteration {
    pub reflection: String,
    pub rewrite: String,
    pub answer: String,
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrState {
    pub qa: QaPair,
    pub base_trace: CotTrace,
    pub wrong_answer: String,
    pub iterations: Vec<ScrIteration>,
    pub limit: u32,
    pub status: ScrStatus,
    /// Why the loop stopped early, when a call failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

impl ScrState {
    pub fn new(qa: QaPair, base_trace: CotTrace, wrong_answer: String, limit: u32) -> ScrState {
        ScrState {
            qa,
            base_trace,
            wrong_answer,
            iterations: Vec::new(),
            limit,
            status: ScrStatus::Running,
            cause: None,
        }
    }

    /// The answer the next reflection has to diagnose.
    pub fn current_wrong_answer(&self) -> &str {
        self.iterations
            .last()
            .map_or(&self.wrong_answer, |it| &it.answer)
    }

    fn merged(&self) -> CotTrace {
        let mut t = self.base_trace.clone();
        for it in &self.iterations {
            t.push(SegmentKind::Reflection, it.reflection.clone());
            t.push(SegmentKind::Rewrite, it.rewrite.clone());
        }
        t
    }
}

fn joined(reasoning: &str, answer: &str) -> String {
    [reasoning.trim(), answer.trim()]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Ask the model to diagnose `wrong_answer` given the gold answer.
pub async fn reflect(
    question: &str,
    trace: &CotTrace,
    wrong_answer: &str,
    gold: &str,
    cfg: &ScrConfig,
    backend: &Gateway,
    templates: &TemplateSet,
) -> Result<String, ScrError> {
    if normalize_answer(wrong_answer) == normalize_answer(gold) {
        return Err(ScrError::Precondition(
            "answer already matches the gold answer".into(),
        ));
    }
    let rendered = trace.rendered();
    let prompt = templates
        .render(
            TemplateName::Reflect,
            &[
                ("question", question),
                ("trace", &rendered),
                ("answer", wrong_answer),
                ("gold", gold),
            ],
        )
        .map_err(|e| ScrError::Precondition(e.to_string()))?;
    let req = ModelRequest::new(prompt)
        .sampling(cfg.sampling)
        .directive(cfg.directive);
    let resp = backend.complete(&req).await?;
    let text = joined(&resp.reasoning_text, &resp.answer_text);
    if text.is_empty() {
        return Err(ScrError::Malformed("empty reflection".into()));
    }
    Ok(text)
}

/// Continue from a merged trace that ends in a reflection.
pub async fn rewrite(
    question: &str,
    merged: &CotTrace,
    cfg: &ScrConfig,
    backend: &Gateway,
    templates: &TemplateSet,
) -> Result<(String, String), ScrError> {
    if merged.last_kind() != Some(SegmentKind::Reflection) {
        return Err(ScrError::Precondition(
            "merged trace must end with a reflection".into(),
        ));
    }
    let rendered = merged.rendered();
    let prompt = templates
        .render(
            TemplateName::Rewrite,
            &[("question", question), ("trace", &rendered)],
        )
        .map_err(|e| ScrError::Precondition(e.to_string()))?;
    let req = ModelRequest::new(prompt)
        .sampling(cfg.sampling)
        .directive(cfg.directive);
    let resp = backend.complete(&req).await?;
    solution_parts(&resp.reasoning_text, &resp.answer_text)
        .ok_or_else(|| ScrError::Malformed("continuation has no extractable answer".into()))
}

/// Original trace followed by each iteration's reflection and rewrite.
pub fn assemble_final_trace(state: &ScrState) -> Result<CotTrace, ScrError> {
    if state.iterations.is_empty() {
        return Err(ScrError::Precondition("no SCR iterations recorded".into()));
    }
    Ok(state.merged())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScrOutcome {
    pub sample: Option<UnannotatedSample>,
    pub state: ScrState,
}

/// Run the reflect, rewrite, verify loop for at most `cfg.limit` rounds.
///
/// Any failed call ends the loop as EXHAUSTED with `state.cause` set.
pub async fn run_scr(
    qa: &QaPair,
    base_trace: CotTrace,
    wrong_answer: &str,
    cfg: &ScrConfig,
    generator: &Gateway,
    matcher: &Gateway,
    templates: &TemplateSet,
) -> Result<ScrOutcome, ScrError> {
    if cfg.limit == 0 {
        return Err(ScrError::Precondition("limit must be at least 1".into()));
    }
    if base_trace.is_empty() {
        return Err(ScrError::Precondition("base trace is empty".into()));
    }
    if normalize_answer(wrong_answer) == normalize_answer(&qa.gold_answer) {
        return Err(ScrError::Precondition("base answer matches the gold answer".into()));
    }
    let mut state = ScrState::new(qa.clone(), base_trace, wrong_answer.to_string(), cfg.limit);

    while (state.iterations.len() as u32) < cfg.limit {
        let merged = state.merged();
        let reflection = match reflect(
            &qa.question,
            &merged,
            state.current_wrong_answer(),
            &qa.gold_answer,
            cfg,
            generator,
            templates,
        )
        .await
        {
            Ok(r) => r,
            Err(e) => return Ok(abort(state, "reflect", e)),
        };
        let mut with_reflection = merged;
        with_reflection.push(SegmentKind::Reflection, reflection.clone());
        let (rewrite_text, answer) =
            match rewrite(&qa.question, &with_reflection, cfg, generator, templates).await {
                Ok(r) => r,
                Err(e) => return Ok(abort(state, "rewrite", e)),
            };
        let verified = match verify_answer(&answer, &qa.gold_answer, matcher, templates).await {
            Ok(v) => v,
            Err(e) => {
                state.iterations.push(ScrIteration {
                    reflection,
                    rewrite: rewrite_text,
                    answer,
                    verified: false,
                });
                return Ok(abort_cause(state, format!("verify: {e}")));
            }
        };
        state.iterations.push(ScrIteration {
            reflection,
            rewrite: rewrite_text,
            answer: answer.clone(),
            verified,
        });
        if verified {
            state.status = ScrStatus::Succeeded;
            let trace = assemble_final_trace(&state)?;
            let sample = UnannotatedSample {
                qa: qa.clone(),
                solution: Solution {
                    trace,
                    final_answer: answer,
                },
            };
            return Ok(ScrOutcome {
                sample: Some(sample),
                state,
            });
        }
    }
    state.status = ScrStatus::Exhausted;
    Ok(ScrOutcome {
        sample: None,
        state,
    })
}

fn abort(state: ScrState, step: &str, e: ScrError) -> ScrOutcome {
    abort_cause(state, format!("{step}: {e}"))
}

fn abort_cause(mut state: ScrState, cause: String) -> ScrOutcome {
    state.status = ScrStatus::Exhausted;
    state.cause = Some(cause);
    ScrOutcome {
        sample: None,
        state,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::scripted::{Reply, ScriptedBackend};
    use crate::gateway::{BackendConfig, RetryPolicy, WireRequest};
    use crate::model::fixtures;
    use proptest::prelude::*;

    fn gw(b: ScriptedBackend) -> (Gateway, Arc<ScriptedBackend>) {
        let b = Arc::new(b);
        let cfg = BackendConfig {
            retry: RetryPolicy {
                max_attempts: 1,
                ..RetryPolicy::default()
            },
            ..BackendConfig::default()
        };
        (Gateway::new(b.clone(), cfg).unwrap(), b)
    }

    fn qa() -> QaPair {
        fixtures::qa("fin:7", "What is the coupon rate?", "5%")
    }

    fn is_reflect(w: &WireRequest) -> bool {
        w.user.contains("Golden answer:")
    }

    /// Reflections are numbered by how many reflections the trace already
    /// holds; rewrite k answers correctly once k >= `succeed_at`.
    fn scripted(succeed_at: usize) -> ScriptedBackend {
        ScriptedBackend::new(move |w, _| {
            let k = w.user.matches("REFLECTION-").count();
            if is_reflect(w) {
                Reply::Text(format!("REFLECTION-{k}: the rate should be 5%."))
            } else if k >= succeed_at {
                Reply::Text(format!("REWRITE-{k} recomputed. Final Answer: 5%"))
            } else {
                Reply::Text(format!("REWRITE-{k} still off. Final Answer: {}%", 10 + k))
            }
        })
    }

    fn calls(b: &ScriptedBackend) -> (usize, usize) {
        let reqs = b.stats().requests;
        let r = reqs.iter().filter(|w| is_reflect(w)).count();
        (r, reqs.len() - r)
    }

    async fn run(backend: ScriptedBackend, limit: u32) -> (ScrOutcome, Arc<ScriptedBackend>) {
        let (g, b) = gw(backend);
        let (m, _) = gw(ScriptedBackend::fixed("NOT_EQUIVALENT"));
        let cfg = ScrConfig {
            limit,
            ..ScrConfig::default()
        };
        let out = run_scr(&qa(), CotTrace::original("base reasoning"), "4%", &cfg, &g, &m, &TemplateSet::builtin())
            .await
            .unwrap();
        (out, b)
    }

    #[tokio::test]
    async fn succeeds_on_first_iteration() {
        let (out, _) = run(scripted(1), 3).await;
        let s = out.sample.unwrap();
        use SegmentKind::*;
        assert_eq!(s.solution.trace.kinds(), [Original, Reflection, Rewrite]);
        assert_eq!(out.state.status, ScrStatus::Succeeded);
        assert_eq!(s.solution.final_answer, "5%");
    }

    #[tokio::test]
    async fn fails_once_then_succeeds() {
        let (out, b) = run(scripted(2), 3).await;
        let s = out.sample.unwrap();
        use SegmentKind::*;
        assert_eq!(s.solution.trace.kinds(), [Original, Reflection, Rewrite, Reflection, Rewrite]);
        assert_eq!(s.solution.final_answer, out.state.iterations[1].answer);
        assert_eq!(out.state.iterations[0].answer, "11%");
        assert_eq!(calls(&b), (2, 2));
        // second reflection diagnoses the first rewrite's answer
        let reqs = b.stats().requests;
        let second_reflect = reqs.iter().filter(|w| is_reflect(w)).nth(1).unwrap();
        assert!(second_reflect.user.contains("Your answer: 11%"));
    }

    #[tokio::test]
    async fn never_succeeding_exhausts_at_limit() {
        let (out, b) = run(scripted(usize::MAX), 2).await;
        assert!(out.sample.is_none());
        assert_eq!(out.state.status, ScrStatus::Exhausted);
        assert_eq!(out.state.iterations.len(), 2);
        assert!(out.state.cause.is_none());
        assert_eq!(calls(&b), (2, 2));
    }

    #[tokio::test]
    async fn reflect_prompt_carries_both_answers() {
        let (g, b) = gw(ScriptedBackend::echo());
        let t = TemplateSet::builtin();
        let text = reflect("Q?", &CotTrace::original("T"), "WRONG-A", "GOLD-A*", &ScrConfig::default(), &g, &t)
            .await
            .unwrap();
        assert!(text.contains("WRONG-A") && text.contains("GOLD-A*"));
        assert_eq!(b.stats().calls, 1);
    }

    #[tokio::test]
    async fn reflect_and_rewrite_contracts() {
        let t = TemplateSet::builtin();
        let c = ScrConfig::default();
        let (g, _) = gw(ScriptedBackend::fixed("<think>only thoughts</think>"));
        assert!(matches!(
            reflect("Q", &CotTrace::original("T"), "a", "b", &c, &g, &t).await,
            Err(ScrError::Gateway(GatewayError::Malformed(_)))
        ));
        assert!(matches!(
            reflect("Q", &CotTrace::original("T"), "5%", "5%.", &c, &g, &t).await,
            Err(ScrError::Precondition(_))
        ));

        let mut merged = CotTrace::original("T");
        merged.push(SegmentKind::Reflection, "R");
        let (g, _) = gw(ScriptedBackend::fixed("continued reasoning, Final Answer: 9"));
        assert_eq!(
            rewrite("Q", &merged, &c, &g, &t).await.unwrap(),
            ("continued reasoning,".to_string(), "9".to_string())
        );
        let (g, _) = gw(ScriptedBackend::fixed("continued without a conclusion"));
        assert!(matches!(rewrite("Q", &merged, &c, &g, &t).await, Err(ScrError::Malformed(_))));
        merged.push(SegmentKind::Rewrite, "W");
        assert!(matches!(rewrite("Q", &merged, &c, &g, &t).await, Err(ScrError::Precondition(_))));
    }

    #[tokio::test]
    async fn gateway_failure_aborts_as_exhausted() {
        let (out, _) = run(ScriptedBackend::new(|_, _| Reply::Reject("nope".into())), 3).await;
        assert_eq!(out.state.status, ScrStatus::Exhausted);
        assert!(out.state.iterations.is_empty());
        assert!(out.state.cause.unwrap().starts_with("reflect"));
    }

    fn state(n: usize) -> ScrState {
        let mut s = ScrState::new(qa(), CotTrace::original("base"), "4%".into(), 3);
        for i in 0..n {
            s.iterations.push(ScrIteration {
                reflection: format!("rf{i}"),
                rewrite: format!("rw{i}"),
                answer: "x".into(),
                verified: false,
            });
        }
        s
    }

    #[test]
    fn assembly_shapes() {
        assert_eq!(assemble_final_trace(&state(1)).unwrap().len(), 3);
        let t = assemble_final_trace(&state(3)).unwrap();
        assert_eq!(t.len(), 7);
        assert!(t.violations().is_empty());
        assert!(matches!(assemble_final_trace(&state(0)), Err(ScrError::Precondition(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn scr_invariants(succeed_at in 1usize..6, limit in 1u32..5) {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
            let (out, b) = rt.block_on(run(scripted(succeed_at), limit));
            let st = &out.state;
            let (reflects, rewrites) = calls(&b);
            prop_assert!(reflects <= limit as usize && rewrites <= limit as usize);
            prop_assert!(st.iterations.len() <= limit as usize);
            match &out.sample {
                Some(s) => {
                    prop_assert_eq!(st.status, ScrStatus::Succeeded);
                    prop_assert!(st.iterations.last().unwrap().verified);
                    prop_assert!(s.solution.trace.violations().is_empty());
                    prop_assert!(s.solution.trace.concatenated().len() > st.base_trace.concatenated().len());
                    prop_assert_eq!(normalize_answer(&s.solution.final_answer), normalize_answer(&st.qa.gold_answer));
                }
                None => {
                    prop_assert_eq!(st.status, ScrStatus::Exhausted);
                    prop_assert_eq!(st.iterations.len(), limit as usize);
                    prop_assert!(st.iterations.iter().all(|i| !i.verified));
                }
            }
            prop_assert_eq!(succeed_at <= limit as usize, out.sample.is_some());
        }
    }
}
