//! Chat-completion client used for LLM-sourced captions.

use std::time::Duration;

use serde_json::{json, Value};

use super::template::CAPTION_PREFIX;
use crate::error::{Error, Result};

/// Captions longer than this are cut at the nearest char boundary below it.
pub const MAX_RESPONSE_BYTES: usize = 1024;
/// Raw HTTP bodies larger than this are rejected.
const MAX_BODY_BYTES: u64 = 64 * 1024;
pub const DEFAULT_RETRIES: usize = 3;

pub trait LlmClient: Send + Sync {
    /// One completion attempt. Transport failures and malformed payloads are
    /// reported as [`Error::Endpoint`].
    fn complete(&self, prompt: &str, timeout: Duration) -> Result<String>;
}

/// Generic JSON chat-completion endpoint (`POST {model, messages}` returning
/// `choices[0].message.content`).
#[derive(Clone, Debug)]
pub struct HttpChatClient {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
}

impl HttpChatClient {
    /// Reads `LLM_ENDPOINT` (required), `LLM_API_KEY` and `LLM_MODEL`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("LLM_ENDPOINT").map_err(|_| Error::Config("LLM_ENDPOINT is not set".into()))?;
        Ok(HttpChatClient {
            endpoint,
            api_key: std::env::var("LLM_API_KEY").ok(),
            model: std::env::var("LLM_MODEL").unwrap_or_else(|_| "default".into()),
        })
    }
}

fn endpoint_err(msg: impl Into<String>, raw: Option<String>) -> Error {
    Error::Endpoint {
        msg: msg.into(),
        raw,
        attempts: 1,
    }
}

impl LlmClient for HttpChatClient {
    fn complete(&self, prompt: &str, timeout: Duration) -> Result<String> {
        let mut req = ureq::post(&self.endpoint)
            .config()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut resp = req.send_json(&body).map_err(|e| endpoint_err(e.to_string(), None))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .read_to_string()
            .map_err(|e| endpoint_err(e.to_string(), None))?;
        if !status.is_success() {
            return Err(endpoint_err(format!("HTTP {status}"), Some(text)));
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| endpoint_err(format!("malformed JSON: {e}"), Some(text.clone())))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| endpoint_err("missing choices[0].message.content", Some(text)))
    }
}

pub fn cap_response(mut s: String) -> String {
    if s.len() > MAX_RESPONSE_BYTES {
        let mut cut = MAX_RESPONSE_BYTES;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
    }
    s
}

/// Trims, caps and checks the required caption prefix.
pub fn validate_caption(raw: String) -> Result<String> {
    let text = cap_response(raw.trim().to_owned());
    if text.starts_with(CAPTION_PREFIX) {
        Ok(text)
    } else {
        Err(Error::Validation {
            msg: format!("caption does not begin with {CAPTION_PREFIX:?}"),
            raw,
        })
    }
}

/// Calls `client` once plus up to `retries` more times while it reports
/// retryable errors. The last endpoint error carries the total attempt count.
pub fn complete_with_retry(client: &dyn LlmClient, prompt: &str, timeout: Duration, retries: usize) -> Result<String> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match client.complete(prompt, timeout) {
            Ok(s) => return Ok(s),
            Err(e) if e.is_retryable() && attempt <= retries => {
                log::warn!("llm attempt {attempt} failed: {e}");
            }
            Err(Error::Endpoint { msg, raw, .. }) => {
                return Err(Error::Endpoint {
                    msg,
                    raw,
                    attempts: attempt,
                })
            }
            Err(e) => return Err(e),
        }
    }
}
