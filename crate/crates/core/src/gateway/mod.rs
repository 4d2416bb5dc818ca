//! Uniform, rate-limited, retrying access to reasoning-model services.
//!
//! A [`Gateway`] wraps one [`Backend`] and owns all flow control for it: an
//! in-flight bound, a sliding-window request budget and the retry loop.
//! One gateway is shared (via `Arc`) by every worker that talks to the same
//! service, so the bounds hold globally for that service.

pub mod directive;
pub mod http;
pub mod limiter;
pub mod scripted;
pub mod trace;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use directive::LengthDirective;
use limiter::RateLimiter;
use trace::{parse_trace, Delimiters};

use crate::template::RenderedPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub nucleus_mass: f64,
    pub max_output_units: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.7,
            nucleus_mass: 0.95,
            max_output_units: 8192,
        }
    }
}

impl SamplingParams {
    pub fn check(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        if !(self.nucleus_mass > 0.0 && self.nucleus_mass <= 1.0) {
            return Err(format!("nucleus mass {} must be in (0, 1]", self.nucleus_mass));
        }
        if self.max_output_units == 0 {
            return Err("max_output_units must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub role_prompt: String,
    pub user_prompt: String,
    pub sampling: SamplingParams,
    pub length_directive: LengthDirective,
    /// Ordinal among repeated samples of the same prompt. Forwarded to the
    /// backend as a sampling seed so candidates differ but stay reproducible.
    pub sample_index: u32,
}

impl ModelRequest {
    pub fn new(prompt: RenderedPrompt) -> Self {
        ModelRequest {
            role_prompt: prompt.system,
            user_prompt: prompt.user,
            sampling: SamplingParams::default(),
            length_directive: LengthDirective::Long,
            sample_index: 0,
        }
    }

    pub fn sampling(mut self, s: SamplingParams) -> Self {
        self.sampling = s;
        self
    }

    pub fn directive(mut self, d: LengthDirective) -> Self {
        self.length_directive = d;
        self
    }

    pub fn sample_index(mut self, i: u32) -> Self {
        self.sample_index = i;
        self
    }

    pub fn check(&self) -> Result<(), String> {
        if self.role_prompt.trim().is_empty() {
            return Err("role prompt is empty".into());
        }
        if self.user_prompt.trim().is_empty() {
            return Err("user prompt is empty".into());
        }
        self.sampling.check()
    }
}

/// What a backend actually receives: prompts with length control applied.
#[derive(Debug, Clone, PartialEq)]
pub struct WireRequest {
    pub system: String,
    pub user: String,
    pub sampling: SamplingParams,
    pub sample_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelResponse {
    pub reasoning_text: String,
    pub answer_text: String,
    pub raw: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: transport failure, overload, 5xx.
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("attempt timed out")]
    Timeout,
    /// Not worth retrying: bad credentials, bad request, unknown prompt.
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("malformed reply: {0}")]
    Malformed(String),
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn send(&self, req: &WireRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GatewayError {
    #[error("exhausted after {attempts} attempt(s): {cause}")]
    Exhausted { attempts: u32, cause: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("request deadline of {0} ms exceeded")]
    Timeout(u64),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gateway shut down")]
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_multiplier: f64,
    /// Full jitter: sleep a uniform draw from [0, cap] instead of the cap.
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 500,
            backoff_multiplier: 2.0,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep before retry number `retry` (1-based).
    pub fn backoff_cap(&self, retry: u32) -> Duration {
        let factor = self.backoff_multiplier.powi(retry.saturating_sub(1) as i32);
        Duration::from_millis((self.backoff_base_ms as f64 * factor).round() as u64)
    }

    fn delay(&self, retry: u32) -> Duration {
        let cap = self.backoff_cap(retry);
        if self.jitter {
            let ms = rand::rng().random_range(0..=cap.as_millis() as u64);
            Duration::from_millis(ms)
        } else {
            cap
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Human-readable identity of the service (URL or fixture path).
    pub endpoint: String,
    pub max_inflight: usize,
    pub requests_per_minute: u32,
    pub retry: RetryPolicy,
    pub attempt_timeout_ms: Option<u64>,
    /// Bound on one `complete` call, including retries and waits.
    pub deadline_ms: Option<u64>,
    pub delimiters: Delimiters,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: String::new(),
            max_inflight: 8,
            requests_per_minute: 600,
            retry: RetryPolicy::default(),
            attempt_timeout_ms: None,
            deadline_ms: None,
            delimiters: Delimiters::default(),
        }
    }
}

impl BackendConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.max_inflight < 1 {
            return Err("max_inflight must be >= 1".into());
        }
        if self.requests_per_minute < 1 {
            return Err("requests_per_minute must be >= 1".into());
        }
        if self.retry.max_attempts < 1 {
            return Err("retry.max_attempts must be >= 1".into());
        }
        if self.retry.backoff_base_ms < 1 {
            return Err("retry.backoff_base_ms must be positive".into());
        }
        if !(self.retry.backoff_multiplier > 1.0) {
            return Err("retry.backoff_multiplier must be > 1".into());
        }
        if self.delimiters.open.is_empty() || self.delimiters.close.is_empty() {
            return Err("reasoning delimiters must be non-empty".into());
        }
        Ok(())
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    config: BackendConfig,
    limiter: RateLimiter,
    inflight: Semaphore,
    exemplars: Vec<String>,
    closed: AtomicBool,
    attempts: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("endpoint", &self.config.endpoint)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: BackendConfig) -> Result<Gateway, GatewayError> {
        config.check().map_err(GatewayError::InvalidRequest)?;
        Ok(Gateway {
            backend,
            limiter: RateLimiter::per_minute(config.requests_per_minute),
            inflight: Semaphore::new(config.max_inflight),
            config,
            exemplars: Vec::new(),
            closed: AtomicBool::new(false),
            attempts: AtomicU64::new(0),
        })
    }

    /// Exemplars used to realize [`LengthDirective::Short`].
    pub fn with_exemplars(mut self, exemplars: Vec<String>) -> Self {
        self.exemplars = exemplars;
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Total backend calls issued so far, retries included.
    pub fn attempts_issued(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    /// Stop admitting new work. Calls already talking to the backend finish.
    pub fn shutdown(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }

    pub fn is_shut_down(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    /// Wait until no request is in flight.
    pub async fn drain(&self) {
        let n = self.config.max_inflight as u32;
        if let Ok(permits) = self.inflight.acquire_many(n).await {
            drop(permits);
        }
    }

    pub async fn complete(&self, req: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        if self.is_shut_down() {
            return Err(GatewayError::Shutdown);
        }
        req.check().map_err(GatewayError::InvalidRequest)?;
        let user = directive::apply(&req.user_prompt, req.length_directive, &self.exemplars)
            .ok_or_else(|| {
                GatewayError::InvalidRequest(format!(
                    "short directive needs {} exemplars, have {}",
                    directive::SHORT_EXEMPLAR_COUNT,
                    self.exemplars.len()
                ))
            })?;
        let wire = WireRequest {
            system: req.role_prompt.clone(),
            user,
            sampling: req.sampling,
            sample_index: req.sample_index,
        };
        match self.config.deadline_ms {
            Some(ms) => tokio::time::timeout(Duration::from_millis(ms), self.attempt_loop(&wire))
                .await
                .unwrap_or(Err(GatewayError::Timeout(ms))),
            None => self.attempt_loop(&wire).await,
        }
    }

    async fn attempt_loop(&self, wire: &WireRequest) -> Result<ModelResponse, GatewayError> {
        let policy = &self.config.retry;
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self
                    .inflight
                    .acquire()
                    .await
                    .map_err(|_| GatewayError::Shutdown)?;
                self.limiter.acquire().await;
                self.attempts.fetch_add(1, Ordering::Relaxed);
                match self.config.attempt_timeout_ms {
                    Some(ms) => tokio::time::timeout(Duration::from_millis(ms), self.backend.send(wire))
                        .await
                        .unwrap_or(Err(BackendError::Timeout)),
                    None => self.backend.send(wire).await,
                }
            };
            let cause = match outcome {
                Ok(raw) => return self.parse(raw),
                Err(BackendError::Malformed(m)) => return Err(GatewayError::Malformed(m)),
                Err(e @ BackendError::Rejected(_)) => {
                    return Err(GatewayError::Exhausted {
                        attempts: attempt,
                        cause: e.to_string(),
                    })
                }
                Err(e) => e.to_string(),
            };
            if attempt >= policy.max_attempts {
                return Err(GatewayError::Exhausted {
                    attempts: attempt,
                    cause,
                });
            }
            tracing::debug!(endpoint = %self.config.endpoint, attempt, %cause, "retrying");
            tokio::time::sleep(policy.delay(attempt)).await;
            if self.is_shut_down() {
                return Err(GatewayError::Shutdown);
            }
        }
    }

    fn parse(&self, raw: String) -> Result<ModelResponse, GatewayError> {
        let parsed = parse_trace(&raw, &self.config.delimiters)
            .map_err(|e| GatewayError::Malformed(e.to_string()))?;
        if parsed.answer.is_empty() {
            return Err(GatewayError::Malformed("no answer text".into()));
        }
        Ok(ModelResponse {
            reasoning_text: parsed.reasoning,
            answer_text: parsed.answer,
            raw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::scripted::{Reply, ScriptedBackend};
    use super::*;
    use tokio::time::Instant;

    fn req(user: &str) -> ModelRequest {
        ModelRequest::new(RenderedPrompt {
            system: "sys".into(),
            user: user.into(),
        })
    }

    fn cfg(max_attempts: u32) -> BackendConfig {
        BackendConfig {
            retry: RetryPolicy {
                max_attempts,
                jitter: false,
                ..RetryPolicy::default()
            },
            ..BackendConfig::default()
        }
    }

    fn gateway(b: ScriptedBackend, c: BackendConfig) -> (Arc<ScriptedBackend>, Gateway) {
        let b = Arc::new(b);
        let g = Gateway::new(b.clone(), c).unwrap();
        (b, g)
    }

    #[tokio::test(start_paused = true)]
    async fn fixture_reply_is_parsed() {
        let (_, g) = gateway(ScriptedBackend::fixed("<think>add</think>Final Answer: 4"), cfg(3));
        let r = g.complete(&req("2+2")).await.unwrap();
        assert_eq!(r.reasoning_text, "add");
        assert_eq!(r.answer_text, "Final Answer: 4");
    }

    #[tokio::test(start_paused = true)]
    async fn succeeds_on_third_attempt_with_exponential_backoff() {
        let b = ScriptedBackend::sequence(vec![
            Reply::Fail("503".into()),
            Reply::Fail("503".into()),
            Reply::Text("ok".into()),
        ]);
        let (b, g) = gateway(b, cfg(3));
        let start = Instant::now();
        let r = g.complete(&req("p")).await.unwrap();
        assert_eq!(r.answer_text, "ok");
        assert_eq!(b.stats().calls, 3);
        // 500ms then 1000ms without jitter
        assert_eq!(start.elapsed(), Duration::from_millis(1500));
    }

    #[tokio::test(start_paused = true)]
    async fn jittered_backoff_stays_under_cap() {
        let b = ScriptedBackend::sequence(vec![Reply::Fail("x".into()); 4]);
        let mut c = cfg(4);
        c.retry.jitter = true;
        let (_, g) = gateway(b, c);
        let start = Instant::now();
        assert!(g.complete(&req("p")).await.is_err());
        assert!(start.elapsed() <= Duration::from_millis(500 + 1000 + 2000));
    }

    #[tokio::test(start_paused = true)]
    async fn always_failing_is_exhausted_after_max_attempts() {
        let b = ScriptedBackend::sequence(vec![Reply::Fail("boom".into())]);
        let (b, g) = gateway(b, cfg(2));
        let err = g.complete(&req("p")).await.unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 2, .. }), "{err:?}");
        assert_eq!(b.stats().calls, 2);
    }

    #[tokio::test(start_paused = true)]
    async fn rejection_is_not_retried() {
        let b = ScriptedBackend::sequence(vec![Reply::Reject("401".into())]);
        let (b, g) = gateway(b, cfg(5));
        let err = g.complete(&req("p")).await.unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 1, .. }));
        assert_eq!(b.stats().calls, 1);
    }

    #[tokio::test(start_paused = true)]
    async fn malformed_output_is_not_retried() {
        let (b, g) = gateway(ScriptedBackend::fixed("<think>never closed"), cfg(3));
        assert!(matches!(g.complete(&req("p")).await, Err(GatewayError::Malformed(_))));
        assert_eq!(b.stats().calls, 1);
        let (_, g) = gateway(ScriptedBackend::fixed("<think>only thinking</think>"), cfg(3));
        assert!(matches!(g.complete(&req("p")).await, Err(GatewayError::Malformed(_))));
    }

    #[tokio::test(start_paused = true)]
    async fn attempt_timeouts_are_retried_then_exhausted() {
        let b = ScriptedBackend::sequence(vec![Reply::Text("late".into())])
            .with_latency(Duration::from_secs(10));
        let mut c = cfg(2);
        c.attempt_timeout_ms = Some(1000);
        let (b, g) = gateway(b, c);
        let err = g.complete(&req("p")).await.unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 2, ref cause } if cause.contains("timed out")));
        assert_eq!(b.stats().calls, 2);
    }

    #[tokio::test(start_paused = true)]
    async fn deadline_yields_timeout() {
        let b = ScriptedBackend::fixed("x").with_latency(Duration::from_secs(10));
        let mut c = cfg(1);
        c.deadline_ms = Some(2000);
        let (_, g) = gateway(b, c);
        assert_eq!(g.complete(&req("p")).await, Err(GatewayError::Timeout(2000)));
    }

    #[tokio::test(start_paused = true)]
    async fn invalid_requests_rejected_up_front() {
        let (b, g) = gateway(ScriptedBackend::fixed("x"), cfg(1));
        assert!(matches!(g.complete(&req("  ")).await, Err(GatewayError::InvalidRequest(_))));
        let mut r = req("p");
        r.sampling.nucleus_mass = 0.0;
        assert!(matches!(g.complete(&r).await, Err(GatewayError::InvalidRequest(_))));
        let r = req("p").directive(LengthDirective::Short);
        assert!(matches!(g.complete(&r).await, Err(GatewayError::InvalidRequest(_))));
        assert_eq!(b.stats().calls, 0);
    }

    #[tokio::test(start_paused = true)]
    async fn directives_reach_the_wire() {
        let b = ScriptedBackend::echo();
        let (_, g) = gateway(b, cfg(1));
        let g = g.with_exemplars(vec!["E1".into(), "E2".into(), "E3".into()]);
        let r = g.complete(&req("Q").directive(LengthDirective::Medium)).await.unwrap();
        assert!(r.answer_text.ends_with("Be concise."));
        let r = g.complete(&req("Q").directive(LengthDirective::Short)).await.unwrap();
        assert!(r.answer_text.starts_with("Examples") && r.answer_text.contains("E3"));
    }

    #[tokio::test(start_paused = true)]
    async fn shutdown_refuses_new_work() {
        let (_, g) = gateway(ScriptedBackend::fixed("x"), cfg(1));
        g.shutdown();
        assert_eq!(g.complete(&req("p")).await, Err(GatewayError::Shutdown));
        g.drain().await;
    }

    #[test]
    fn config_checks() {
        let mut c = BackendConfig::default();
        assert!(c.check().is_ok());
        c.max_inflight = 0;
        assert!(c.check().is_err());
        let mut c = BackendConfig::default();
        c.retry.backoff_multiplier = 1.0;
        assert!(c.check().is_err());
        let mut c = BackendConfig::default();
        c.retry.max_attempts = 0;
        assert!(c.check().is_err());
    }

    #[test]
    fn backoff_caps_grow_geometrically() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff_cap(1), Duration::from_millis(500));
        assert_eq!(p.backoff_cap(2), Duration::from_millis(1000));
        assert_eq!(p.backoff_cap(3), Duration::from_millis(2000));
    }
}
