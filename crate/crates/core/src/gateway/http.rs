//! Backend for OpenAI-compatible chat-completion services.
//!
//! Sends `POST {endpoint}/chat/completions` with a system and a user message.
//! Services that return reasoning in a separate `reasoning_content` field
//! get it wrapped back into the configured delimiters, so downstream parsing
//! sees one uniform format.

use async_trait::async_trait;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::trace::Delimiters;
use super::{Backend, BackendError, WireRequest};

pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    delimiters: Delimiters,
}

impl HttpBackend {
    /// `api_key_env` names the environment variable holding the bearer token.
    pub fn new(
        endpoint: &str,
        model: &str,
        api_key_env: Option<&str>,
        delimiters: Delimiters,
    ) -> Result<HttpBackend, String> {
        let api_key = match api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?,
            ),
            None => None,
        };
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| e.to_string())?;
        Ok(HttpBackend {
            client,
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
            delimiters,
        })
    }

    fn body(&self, req: &WireRequest) -> Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.sampling.temperature,
            "top_p": req.sampling.nucleus_mass,
            "max_tokens": req.sampling.max_output_units,
            "seed": req.sample_index,
        })
    }
}

fn classify(status: StatusCode, body: &str) -> BackendError {
    let msg = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
    if status == StatusCode::TOO_MANY_REQUESTS
        || status == StatusCode::REQUEST_TIMEOUT
        || status.is_server_error()
    {
        BackendError::Transient(msg)
    } else {
        BackendError::Rejected(msg)
    }
}

/// Extract the assistant text from a chat-completion body.
pub fn completion_text(body: &Value, d: &Delimiters) -> Result<String, BackendError> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| BackendError::Malformed("no choices[0].message".into()))?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default();
    let reasoning = message
        .get("reasoning_content")
        .and_then(Value::as_str)
        .unwrap_or_default();
    if content.is_empty() && reasoning.is_empty() {
        return Err(BackendError::Malformed("empty message".into()));
    }
    if reasoning.is_empty() {
        Ok(content.to_string())
    } else {
        Ok(format!("{}{}{}{}", d.open, reasoning, d.close, content))
    }
}

#[async_trait]
impl Backend for HttpBackend {
    async fn send(&self, req: &WireRequest) -> Result<String, BackendError> {
        let mut builder = self.client.post(&self.url).json(&self.body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().await.map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transient(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(classify(status, &text));
        }
        let body: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        completion_text(&body, &self.delimiters)
    }
}
