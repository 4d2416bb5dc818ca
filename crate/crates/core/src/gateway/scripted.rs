//! Offline backend that answers from fixtures.
//!
//! Replies are a pure function of the request and of how many times that
//! exact request (system prompt, user prompt, sample index) has been seen,
//! so a fixed request order gives fixed outputs, and retry sequences such as
//! "fail, fail, succeed" can be scripted.
//!
//! A fixture directory may contain:
//!
//! * `<stem>.prompt` + `<stem>.response` pairs: exact match on the trimmed
//!   user prompt;
//! * `*.json` rule files: `{"rules": [{"prompt_regex": "...", "replies": [...]}]}`.
//!   A rule matches when all of its optional conditions hold
//!   (`system_contains`, `prompt_contains`, `prompt_regex`, `sample_index`).
//!   The k-th call for one request gets `replies[k]`, the last reply
//!   repeating. A reply is a string (expanded with the regex captures, `$name`
//!   syntax, `$$` for a literal dollar) or one of `{"fail": "..."}`,
//!   `{"timeout": true}`, `{"reject": "..."}`.
//!
//! Exact pairs are consulted first, then rule files in filename order, then
//! rules in file order. An unmatched request is rejected.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use regex::Regex;
use serde::Deserialize;
use tokio::time::Instant;

use super::{Backend, BackendError, WireRequest};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Text(String),
    Fail(String),
    Timeout,
    Reject(String),
}

type Responder = dyn Fn(&WireRequest, u32) -> Reply + Send + Sync;

#[derive(Debug, Clone, Default)]
pub struct ScriptStats {
    pub calls: usize,
    pub peak_inflight: usize,
    pub issue_times: Vec<Instant>,
    pub requests: Vec<WireRequest>,
}

pub struct ScriptedBackend {
    responder: Arc<Responder>,
    latency: Duration,
    seen: Mutex<HashMap<(String, String, u32), u32>>,
    inflight: AtomicUsize,
    stats: Mutex<ScriptStats>,
}

impl ScriptedBackend {
    pub fn new(f: impl Fn(&WireRequest, u32) -> Reply + Send + Sync + 'static) -> Self {
        ScriptedBackend {
            responder: Arc::new(f),
            latency: Duration::ZERO,
            seen: Mutex::new(HashMap::new()),
            inflight: AtomicUsize::new(0),
            stats: Mutex::new(ScriptStats::default()),
        }
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_, _| Reply::Text(text.clone()))
    }

    /// Same reply sequence for every request; the last reply repeats.
    pub fn sequence(replies: Vec<Reply>) -> Self {
        assert!(!replies.is_empty());
        Self::new(move |_, k| replies[(k as usize).min(replies.len() - 1)].clone())
    }

    /// Replies with the user prompt it received.
    pub fn echo() -> Self {
        Self::new(|req, _| Reply::Text(req.user.clone()))
    }

    pub fn from_rules(rules: Vec<Rule>) -> Self {
        Self::new(move |req, k| {
            for rule in &rules {
                if let Some(reply) = rule.reply(req, k) {
                    return reply;
                }
            }
            Reply::Reject(format!("no fixture matches prompt: {}", preview(&req.user)))
        })
    }

    pub fn from_dir(dir: &Path) -> Result<Self, FixtureError> {
        Ok(Self::from_rules(load_rules(dir)?))
    }

    /// Simulated service time per call.
    pub fn with_latency(mut self, d: Duration) -> Self {
        self.latency = d;
        self
    }

    pub fn stats(&self) -> ScriptStats {
        self.stats.lock().unwrap().clone()
    }
}

fn preview(s: &str) -> String {
    let flat: String = s.split_whitespace().collect::<Vec<_>>().join(" ");
    flat.chars().take(100).collect()
}

struct InflightGuard<'a>(&'a AtomicUsize);

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    async fn send(&self, req: &WireRequest) -> Result<String, BackendError> {
        let now_inflight = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InflightGuard(&self.inflight);
        {
            let mut st = self.stats.lock().unwrap();
            st.calls += 1;
            st.peak_inflight = st.peak_inflight.max(now_inflight);
            st.issue_times.push(Instant::now());
            st.requests.push(req.clone());
        }
        let k = {
            let mut seen = self.seen.lock().unwrap();
            let n = seen
                .entry((req.system.clone(), req.user.clone(), req.sample_index))
                .or_insert(0);
            let k = *n;
            *n += 1;
            k
        };
        let reply = (self.responder)(req, k);
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        match reply {
            Reply::Text(t) => Ok(t),
            Reply::Fail(m) => Err(BackendError::Transient(m)),
            Reply::Reject(m) => Err(BackendError::Rejected(m)),
            Reply::Timeout => {
                // Never completes on its own; the gateway's attempt timeout
                // (if any) turns this into a timeout.
                std::future::pending::<()>().await;
                unreachable!()
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("reading fixture {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("fixture {path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub system_contains: Option<String>,
    pub prompt_contains: Option<String>,
    pub prompt_regex: Option<Regex>,
    pub exact_prompt: Option<String>,
    pub sample_index: Option<u32>,
    pub replies: Vec<Reply>,
}

impl Rule {
    pub fn matching(pattern: &str, replies: Vec<Reply>) -> Rule {
        Rule {
            system_contains: None,
            prompt_contains: None,
            prompt_regex: Some(Regex::new(pattern).expect("valid fixture regex")),
            exact_prompt: None,
            sample_index: None,
            replies,
        }
    }

    fn reply(&self, req: &WireRequest, k: u32) -> Option<Reply> {
        if let Some(s) = &self.system_contains {
            if !req.system.contains(s.as_str()) {
                return None;
            }
        }
        if let Some(s) = &self.prompt_contains {
            if !req.user.contains(s.as_str()) {
                return None;
            }
        }
        if let Some(p) = &self.exact_prompt {
            if req.user.trim() != p.trim() {
                return None;
            }
        }
        if let Some(i) = self.sample_index {
            if req.sample_index != i {
                return None;
            }
        }
        let caps = match &self.prompt_regex {
            Some(re) => Some(re.captures(&req.user)?),
            None => None,
        };
        let reply = self.replies[(k as usize).min(self.replies.len() - 1)].clone();
        Some(match (reply, caps) {
            (Reply::Text(t), Some(caps)) => {
                let mut out = String::new();
                caps.expand(&t, &mut out);
                Reply::Text(out)
            }
            (r, _) => r,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    rules: Vec<RuleSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleSpec {
    system_contains: Option<String>,
    prompt_contains: Option<String>,
    prompt_regex: Option<String>,
    sample_index: Option<u32>,
    replies: Vec<ReplySpec>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReplySpec {
    Text(String),
    Fail { fail: String },
    Timeout {
        #[allow(dead_code)]
        timeout: bool,
    },
    Reject { reject: String },
}

impl From<ReplySpec> for Reply {
    fn from(r: ReplySpec) -> Reply {
        match r {
            ReplySpec::Text(t) => Reply::Text(t),
            ReplySpec::Fail { fail } => Reply::Fail(fail),
            ReplySpec::Timeout { .. } => Reply::Timeout,
            ReplySpec::Reject { reject } => Reply::Reject(reject),
        }
    }
}

fn read(path: &Path) -> Result<String, FixtureError> {
    std::fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_rules(dir: &Path) -> Result<Vec<Rule>, FixtureError> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|source| FixtureError::Io {
            path: dir.display().to_string(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();

    let mut exact = Vec::new();
    let mut rules = Vec::new();
    for path in &entries {
        let invalid = |message: String| FixtureError::Invalid {
            path: path.display().to_string(),
            message,
        };
        match path.extension().and_then(|e| e.to_str()) {
            Some("prompt") => {
                let resp = path.with_extension("response");
                if !resp.exists() {
                    return Err(invalid("missing matching .response file".into()));
                }
                exact.push(Rule {
                    system_contains: None,
                    prompt_contains: None,
                    prompt_regex: None,
                    exact_prompt: Some(read(path)?),
                    sample_index: None,
                    replies: vec![Reply::Text(read(&resp)?)],
                });
            }
            Some("json") => {
                let file: RuleFile =
                    serde_json::from_str(&read(path)?).map_err(|e| invalid(e.to_string()))?;
                for spec in file.rules {
                    if spec.replies.is_empty() {
                        return Err(invalid("rule without replies".into()));
                    }
                    let prompt_regex = spec
                        .prompt_regex
                        .as_deref()
                        .map(Regex::new)
                        .transpose()
                        .map_err(|e| invalid(e.to_string()))?;
                    rules.push(Rule {
                        system_contains: spec.system_contains,
                        prompt_contains: spec.prompt_contains,
                        prompt_regex,
                        exact_prompt: None,
                        sample_index: spec.sample_index,
                        replies: spec.replies.into_iter().map(Reply::from).collect(),
                    });
                }
            }
            _ => {}
        }
    }
    exact.extend(rules);
    Ok(exact)
}
