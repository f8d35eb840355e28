//! OpenAI-style chat-completion endpoint over HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendKind, ChatBackend, ChatCall, ProviderError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: "TEACHENV_API_KEY".into(),
            timeout_secs: 120,
        }
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, ProviderError> {
        let api_key = std::env::var(&config.api_key_env).ok();
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::ProviderUnavailable(e.to_string()))?;
        Ok(LiveBackend {
            config,
            api_key,
            http,
        })
    }
}

impl ChatBackend for LiveBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn chat(&self, call: &ChatCall<'_>) -> Result<String, ProviderError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": call.prompt}],
            "temperature": call.temperature,
            "top_p": call.top_p,
        });
        let mut req = self.http.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| ProviderError::ProviderUnavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ProviderError::ProviderUnavailable(format!(
                "{url}: HTTP {status}"
            )));
        }
        let v: Value = resp
            .json()
            .map_err(|e| ProviderError::ProviderUnavailable(format!("bad response body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(String::from)
            .ok_or_else(|| ProviderError::ProviderUnavailable("response has no message content".into()))
    }
}
