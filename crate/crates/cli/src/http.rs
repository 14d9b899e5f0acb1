//! Chat-completions client for the annotation pipeline.

use std::time::Duration;

use motionguide::annotation::LlmBackend;
use motionguide::{Error, Result};
use serde_json::{json, Value};

pub const API_KEY_ENV: &str = "MOTIONGUIDE_LLM_API_KEY";

/// Posts `{model, messages}` to an OpenAI-style endpoint and returns the
/// first choice's message content.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: &str, model: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            agent,
        }
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, system_prompt: &str, user_prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
        });
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| Error::Backend(format!("request failed: {e}")))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Backend(format!("reading response: {e}")))?;
        if !status.is_success() {
            return Err(Error::Backend(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Backend(format!("response is not JSON: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Backend("response has no choices[0].message.content".into()))
    }
}
