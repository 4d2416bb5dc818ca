//! Candidate CoT sampling, answer verification and solution selection.

use futures::future::join_all;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audit::AuditRecord;
use crate::gateway::trace::{parse_verdict, solution_parts};
use crate::gateway::{Gateway, GatewayError, LengthDirective, ModelRequest, SamplingParams};
use crate::model::{CotTrace, QaPair, Solution};
use crate::template::{TemplateName, TemplateSet};

pub const DEFAULT_CANDIDATES: u32 = 4;

const STAGE: &str = "sample";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub candidates: u32,
    pub directive: LengthDirective,
    pub sampling: SamplingParams,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            candidates: DEFAULT_CANDIDATES,
            directive: LengthDirective::Long,
            sampling: SamplingParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub trace: CotTrace,
    pub answer: String,
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub qa: QaPair,
    /// In request order.
    pub candidates: Vec<Candidate>,
    pub n_requested: u32,
}

impl CandidateSet {
    pub fn is_consistent(&self) -> bool {
        self.n_requested >= 1 && self.candidates.len() <= self.n_requested as usize
    }

    pub fn verified(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.verified)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("all {0} generation request(s) failed")]
    AllFailed(u32),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("verification unavailable: {0}")]
    VerificationUnavailable(GatewayError),
}

/// Candidates obtained for one pair plus an audit record per lost request.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub set: CandidateSet,
    pub audit: Vec<AuditRecord>,
}

/// Issue `n` generation requests (sample indices `0..n`) and keep every
/// parseable response as an unverified candidate.
pub async fn sample_cots(
    qa: &QaPair,
    n: u32,
    directive: LengthDirective,
    sampling: SamplingParams,
    gateway: &Gateway,
    templates: &TemplateSet,
) -> Result<Sampled, SamplerError> {
    if n == 0 {
        return Err(SamplerError::InvalidInput("n must be at least 1".into()));
    }
    let prompt = templates
        .render(TemplateName::Generate, &[("question", &qa.question)])
        .map_err(|e| SamplerError::InvalidInput(e.to_string()))?;
    let base = ModelRequest::new(prompt).sampling(sampling).directive(directive);
    let calls = (0..n).map(|i| {
        let req = base.clone().sample_index(i);
        async move { gateway.complete(&req).await }
    });
    let mut candidates = Vec::new();
    let mut audit = Vec::new();
    for (i, res) in join_all(calls).await.into_iter().enumerate() {
        let failure = match res {
            Ok(resp) => match solution_parts(&resp.reasoning_text, &resp.answer_text) {
                Some((reasoning, answer)) => {
                    candidates.push(Candidate {
                        trace: CotTrace::original(reasoning),
                        answer,
                        verified: false,
                    });
                    continue;
                }
                None => "response has no reasoning or no final answer".to_string(),
            },
            Err(e) => e.to_string(),
        };
        audit.push(
            AuditRecord::new(STAGE, &qa.id, "candidate_failed", failure)
                .with_detail(serde_json::json!({ "sample_index": i })),
        );
    }
    if candidates.is_empty() {
        return Err(SamplerError::AllFailed(n));
    }
    Ok(Sampled {
        set: CandidateSet {
            qa: qa.clone(),
            candidates,
            n_requested: n,
        },
        audit,
    })
}

fn grouped_number() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$").unwrap())
}

/// Canonical form used for the exact-match shortcut.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.trim().to_lowercase();
    let stripped = lowered.trim_end_matches(|c: char| {
        c.is_whitespace()
            || c.is_ascii_punctuation() && !matches!(c, '%' | ')' | ']' | '}' | '$')
            || "。，；：！？、".contains(c)
    });
    let collapsed = crate::text::normalize_whitespace(stripped);
    if grouped_number().is_match(&collapsed) {
        collapsed.replace(',', "")
    } else {
        collapsed
    }
}

/// True when the answers match after normalization, otherwise asks the
/// matcher backend. Exact matches never reach the backend.
pub async fn verify_answer(
    candidate: &str,
    gold: &str,
    matcher: &Gateway,
    templates: &TemplateSet,
) -> Result<bool, SamplerError> {
    if candidate.trim().is_empty() || gold.trim().is_empty() {
        return Err(SamplerError::InvalidInput("answer texts must be non-empty".into()));
    }
    if normalize_answer(candidate) == normalize_answer(gold) {
        return Ok(true);
    }
    let prompt = templates
        .render(
            TemplateName::Match,
            &[("candidate", candidate), ("reference", gold)],
        )
        .map_err(|e| SamplerError::InvalidInput(e.to_string()))?;
    let req = ModelRequest::new(prompt).sampling(SamplingParams {
        temperature: 0.0,
        ..SamplingParams::default()
    });
    let resp = matcher
        .complete(&req)
        .await
        .map_err(SamplerError::VerificationUnavailable)?;
    match parse_verdict(&resp.answer_text, &["EQUIVALENT", "NOT_EQUIVALENT"]) {
        Some("EQUIVALENT") => Ok(true),
        Some(_) => Ok(false),
        None => Err(SamplerError::VerificationUnavailable(GatewayError::Malformed(
            "matcher reply carries no verdict".into(),
        ))),
    }
}

/// Marks each candidate in place. Returns one audit record per candidate
/// whose verification could not be obtained; those stay unverified.
pub async fn verify_candidates(
    set: &mut CandidateSet,
    matcher: &Gateway,
    templates: &TemplateSet,
) -> Vec<AuditRecord> {
    let gold = set.qa.gold_answer.clone();
    let results = join_all(
        set.candidates
            .iter()
            .map(|c| verify_answer(&c.answer, &gold, matcher, templates)),
    )
    .await;
    let mut audit = Vec::new();
    for (i, (c, r)) in set.candidates.iter_mut().zip(results).enumerate() {
        match r {
            Ok(v) => c.verified = v,
            Err(e) => {
                c.verified = false;
                audit.push(
                    AuditRecord::new(STAGE, &set.qa.id, "verification_unavailable", e.to_string())
                        .with_detail(serde_json::json!({ "candidate": i })),
                );
            }
        }
    }
    audit
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("no verified candidate")]
pub struct NoCorrectCandidate;

/// Per-item generator: the run seed mixed with a hash of the item id, so
/// selection does not depend on processing order.
pub fn item_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(b))
}

/// Uniform seeded choice among verified candidates.
pub fn select_solution(cs: &CandidateSet, seed: u64) -> Result<Solution, NoCorrectCandidate> {
    let verified: Vec<&Candidate> = cs.verified().collect();
    if verified.is_empty() {
        return Err(NoCorrectCandidate);
    }
    let pick = item_rng(seed, &cs.qa.id).random_range(0..verified.len());
    Ok(Solution {
        trace: verified[pick].trace.clone(),
        final_answer: verified[pick].answer.clone(),
    })
}

/// What the sampling stage decided for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SampleOutcome {
    Selected { qa: QaPair, solution: Solution },
    /// Handed to SCR with the first candidate in request order as base.
    NoCorrectCandidate { qa: QaPair, base: Candidate },
    Errored { qa: QaPair, cause: String },
}

impl SampleOutcome {
    pub fn qa(&self) -> &QaPair {
        match self {
            SampleOutcome::Selected { qa, .. }
            | SampleOutcome::NoCorrectCandidate { qa, .. }
            | SampleOutcome::Errored { qa, .. } => qa,
        }
    }
}

/// Sample, verify and select for one pair.
///
/// A pair with no verified candidate goes to SCR only when every
/// verification was actually obtained; otherwise it is errored, since an
/// unavailable matcher says nothing about correctness.
pub async fn sample_item(
    qa: &QaPair,
    cfg: &SamplerConfig,
    seed: u64,
    generator: &Gateway,
    matcher: &Gateway,
    templates: &TemplateSet,
) -> (SampleOutcome, Vec<AuditRecord>) {
    let errored = |cause: String| SampleOutcome::Errored {
        qa: qa.clone(),
        cause,
    };
    let Sampled { mut set, mut audit } = match sample_cots(
        qa,
        cfg.candidates,
        cfg.directive,
        cfg.sampling,
        generator,
        templates,
    )
    .await
    {
        Ok(s) => s,
        Err(e) => return (errored(e.to_string()), Vec::new()),
    };
    let unavailable = verify_candidates(&mut set, matcher, templates).await;
    let any_unavailable = !unavailable.is_empty();
    audit.extend(unavailable);
    let outcome = match select_solution(&set, seed) {
        Ok(solution) => SampleOutcome::Selected {
            qa: qa.clone(),
            solution,
        },
        Err(NoCorrectCandidate) if any_unavailable => {
            errored("no verified candidate and verification unavailable".into())
        }
        Err(NoCorrectCandidate) => SampleOutcome::NoCorrectCandidate {
            qa: qa.clone(),
            base: set.candidates.swap_remove(0),
        },
    };
    (outcome, audit)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::scripted::{Reply, ScriptedBackend};
    use crate::gateway::{BackendConfig, RetryPolicy};
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
        fixtures::qa("fin:0", "What is 6 times 7?", "42")
    }

    #[tokio::test]
    async fn four_fixtures_four_candidates() {
        let (g, _) = gw(ScriptedBackend::new(|w, _| {
            Reply::Text(format!("<think>step {}</think>Final Answer: {}", w.sample_index, 40 + w.sample_index))
        }));
        let t = TemplateSet::builtin();
        let s = sample_cots(&qa(), 4, LengthDirective::Long, SamplingParams::default(), &g, &t)
            .await
            .unwrap();
        let answers: Vec<_> = s.set.candidates.iter().map(|c| c.answer.as_str()).collect();
        assert_eq!(answers, ["40", "41", "42", "43"]);
        assert_eq!(s.set.candidates[2].trace.concatenated(), "step 2");
        assert!(s.audit.is_empty());
        assert!(s.set.is_consistent());
    }

    #[tokio::test]
    async fn one_malformed_fixture_is_audited() {
        let (g, _) = gw(ScriptedBackend::new(|w, _| {
            if w.sample_index == 1 {
                Reply::Text("<think>unclosed".into())
            } else {
                Reply::Text("<think>ok</think>Final Answer: 42".into())
            }
        }));
        let t = TemplateSet::builtin();
        let s = sample_cots(&qa(), 4, LengthDirective::Long, SamplingParams::default(), &g, &t)
            .await
            .unwrap();
        assert_eq!(s.set.candidates.len(), 3);
        assert_eq!(s.audit.len(), 1);
        assert_eq!(s.audit[0].detail["sample_index"], 1);
    }

    #[tokio::test]
    async fn all_failing_is_all_failed() {
        let (g, _) = gw(ScriptedBackend::new(|_, _| Reply::Fail("down".into())));
        let t = TemplateSet::builtin();
        let err = sample_cots(&qa(), 4, LengthDirective::Long, SamplingParams::default(), &g, &t)
            .await
            .unwrap_err();
        assert_eq!(err, SamplerError::AllFailed(4));
    }

    #[tokio::test]
    async fn exact_match_skips_the_matcher() {
        let (g, b) = gw(ScriptedBackend::fixed("NOT_EQUIVALENT"));
        let t = TemplateSet::builtin();
        assert!(verify_answer("42", "42", &g, &t).await.unwrap());
        assert!(verify_answer(" 1,000. ", "1000", &g, &t).await.unwrap());
        assert_eq!(b.stats().calls, 0);
    }

    #[tokio::test]
    async fn matcher_decides_the_rest() {
        let (g, b) = gw(ScriptedBackend::new(|w, _| {
            if w.user.contains("$1,000") && w.user.contains("1000 dollars") {
                Reply::Text("EQUIVALENT".into())
            } else {
                Reply::Text("NOT_EQUIVALENT".into())
            }
        }));
        let t = TemplateSet::builtin();
        assert!(verify_answer("$1,000", "1000 dollars", &g, &t).await.unwrap());
        assert!(!verify_answer("A", "B", &g, &t).await.unwrap());
        assert_eq!(b.stats().calls, 2);
    }

    #[tokio::test]
    async fn matcher_failure_is_unavailable() {
        let (g, _) = gw(ScriptedBackend::new(|_, _| Reply::Fail("x".into())));
        let t = TemplateSet::builtin();
        assert!(matches!(
            verify_answer("A", "B", &g, &t).await,
            Err(SamplerError::VerificationUnavailable(_))
        ));
        let (g, _) = gw(ScriptedBackend::fixed("maybe"));
        assert!(matches!(
            verify_answer("A", "B", &g, &t).await,
            Err(SamplerError::VerificationUnavailable(_))
        ));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("  The  Answer. "), "the answer");
        assert_eq!(normalize_answer("-12,345.50"), "-12345.50");
        assert_eq!(normalize_answer("1,2"), "1,2");
        assert_eq!(normalize_answer("5%"), "5%");
        assert_eq!(normalize_answer("是。"), "是");
    }

    fn set(verified: &[bool]) -> CandidateSet {
        CandidateSet {
            qa: qa(),
            candidates: verified
                .iter()
                .enumerate()
                .map(|(i, &v)| Candidate {
                    trace: CotTrace::original(format!("t{i}")),
                    answer: format!("a{i}"),
                    verified: v,
                })
                .collect(),
            n_requested: verified.len().max(1) as u32,
        }
    }

    #[test]
    fn selection_cases() {
        let s = select_solution(&set(&[false, false, true, false]), 1).unwrap();
        assert_eq!(s.final_answer, "a2");
        assert_eq!(select_solution(&set(&[false; 4]), 1), Err(NoCorrectCandidate));
        let three = set(&[true, true, false, true]);
        let first = select_solution(&three, 99).unwrap();
        for _ in 0..10 {
            assert_eq!(select_solution(&three, 99).unwrap(), first);
        }
    }

    #[test]
    fn selection_is_roughly_uniform_across_ids() {
        let mut counts = [0usize; 3];
        for k in 0..3000 {
            let mut s = set(&[true, true, true]);
            s.qa.id = format!("x:{k}");
            let pick = select_solution(&s, 5).unwrap();
            counts[pick.final_answer[1..].parse::<usize>().unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| (850..1150).contains(&c)), "{counts:?}");
    }

    #[tokio::test]
    async fn sample_item_routes_outcomes() {
        let t = TemplateSet::builtin();
        let cfg = SamplerConfig::default();
        let (g, _) = gw(ScriptedBackend::new(|w, _| {
            Reply::Text(format!("<think>r{}</think>Final Answer: {}", w.sample_index, if w.sample_index == 3 { "42" } else { "7" }))
        }));
        let (m, _) = gw(ScriptedBackend::fixed("NOT_EQUIVALENT"));
        let (out, audit) = sample_item(&qa(), &cfg, 1, &g, &m, &t).await;
        assert!(audit.is_empty());
        match out {
            SampleOutcome::Selected { solution, .. } => assert_eq!(solution.final_answer, "42"),
            other => panic!("{other:?}"),
        }

        let (g, _) = gw(ScriptedBackend::new(|w, _| {
            Reply::Text(format!("<think>r{}</think>Final Answer: 7", w.sample_index))
        }));
        let (out, _) = sample_item(&qa(), &cfg, 1, &g, &m, &t).await;
        match out {
            SampleOutcome::NoCorrectCandidate { base, .. } => assert_eq!(base.trace.concatenated(), "r0"),
            other => panic!("{other:?}"),
        }

        let (down, _) = gw(ScriptedBackend::new(|_, _| Reply::Fail("x".into())));
        let (out, audit) = sample_item(&qa(), &cfg, 1, &g, &down, &t).await;
        assert!(matches!(out, SampleOutcome::Errored { .. }));
        assert_eq!(audit.len(), 4);
    }

    fn arb_set() -> impl Strategy<Value = (CandidateSet, u64)> {
        (prop::collection::vec(any::<bool>(), 0..9), any::<u64>(), "[a-z]{1,6}").prop_map(|(v, seed, id)| {
            let mut s = set(&v);
            s.qa.id = id;
            (s, seed)
        })
    }

    proptest! {
        #[test]
        fn never_selects_unverified((cs, seed) in arb_set()) {
            match select_solution(&cs, seed) {
                Ok(sol) => {
                    let chosen = cs.candidates.iter().find(|c| c.answer == sol.final_answer).unwrap();
                    prop_assert!(chosen.verified);
                }
                Err(NoCorrectCandidate) => prop_assert!(cs.verified().next().is_none()),
            }
            prop_assert_eq!(select_solution(&cs, seed), select_solution(&cs, seed));
        }

        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,20}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }
    }

    #[test]
    fn verify_is_reflexive() {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let (g, b) = gw(ScriptedBackend::fixed("NOT_EQUIVALENT"));
        let t = TemplateSet::builtin();
        proptest!(|(x in "\\PC{1,30}")| {
            prop_assume!(!x.trim().is_empty());
            prop_assert!(rt.block_on(verify_answer(&x, &x, &g, &t)).unwrap());
        });
        assert_eq!(b.stats().calls, 0);
    }
}
