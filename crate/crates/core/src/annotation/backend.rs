use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompts::{last_fenced_array, originals_from_translate_prompt, EVALUATE_TEMPLATE, REFINE_TEMPLATE, TRANSLATE_TEMPLATE};
use super::{Flag, Stage};
use crate::{Error, Result};

/// A chat-style model endpoint.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, system_prompt: &str, user_prompt: &str) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 1000,
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Same attempt budget, no sleeping. Used by tests and the mock backend.
    pub fn immediate() -> Self {
        Self {
            base_delay_ms: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_attempts == 0 || !(self.factor >= 1.0) || !self.factor.is_finite() {
            return Err(Error::Parameter("retry needs max_attempts >= 1 and factor >= 1".into()));
        }
        Ok(())
    }

    /// Delay before attempt `k` (0-based), so attempt 0 never waits.
    pub fn delay_before(&self, k: usize) -> Duration {
        if k == 0 {
            return Duration::ZERO;
        }
        let ms = self.base_delay_ms as f64 * self.factor.powi(k as i32 - 1);
        Duration::from_millis(ms.min(u64::MAX as f64) as u64)
    }
}

/// Minimum spacing between requests, shared across worker threads.
#[derive(Debug)]
pub struct RateLimit {
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl RateLimit {
    pub fn new(min_interval: Duration) -> Self {
        Self {
            min_interval,
            last: Mutex::new(None),
        }
    }

    pub fn wait(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

/// What a response parser can say about a reply.
pub enum ReplyError {
    /// Not parseable at all. The request is retried.
    Malformed(String),
    /// Parseable but wrong. Retrying the same prompt will not help.
    Schema(String),
}

/// Backend plus retry and rate limiting.
pub struct LlmClient<'a> {
    backend: &'a dyn LlmBackend,
    retry: RetryPolicy,
    limit: RateLimit,
    sent: AtomicUsize,
}

impl<'a> LlmClient<'a> {
    pub fn new(backend: &'a dyn LlmBackend, retry: RetryPolicy, min_interval: Duration) -> Self {
        Self {
            backend,
            retry,
            limit: RateLimit::new(min_interval),
            sent: AtomicUsize::new(0),
        }
    }

    /// Backend calls made so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.sent.load(Ordering::SeqCst)
    }

    /// Sends the prompt until `parse` accepts the reply or attempts run out.
    pub fn request<T>(
        &self,
        system: &str,
        user: &str,
        parse: impl Fn(&str) -> std::result::Result<T, ReplyError>,
    ) -> Result<T> {
        let mut last_err = String::new();
        for k in 0..self.retry.max_attempts {
            let d = self.retry.delay_before(k);
            if !d.is_zero() {
                std::thread::sleep(d);
            }
            self.limit.wait();
            self.sent.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(system, user) {
                Ok(reply) => match parse(&reply) {
                    Ok(v) => return Ok(v),
                    Err(ReplyError::Schema(m)) => return Err(Error::Schema(m)),
                    Err(ReplyError::Malformed(m)) => last_err = m,
                },
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Backend(format!(
            "gave up after {} attempts: {last_err}",
            self.retry.max_attempts
        )))
    }
}

/// Scripted behaviour for one original string.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockRule {
    pub flag: Option<Flag>,
    pub reason: Option<String>,
    pub corrected: Option<String>,
    /// Reply "not json" whenever a request in this stage contains the item.
    pub garbage_in: Option<Stage>,
}

impl MockRule {
    pub fn uncertain(reason: &str) -> Self {
        Self {
            flag: Some(Flag::Uncertain),
            reason: Some(reason.into()),
            ..Self::default()
        }
    }

    pub fn incorrect(reason: &str, corrected: Option<&str>) -> Self {
        Self {
            flag: Some(Flag::Incorrect),
            reason: Some(reason.into()),
            corrected: corrected.map(str::to_string),
            ..Self::default()
        }
    }

    pub fn garbage(stage: Stage) -> Self {
        Self {
            garbage_in: Some(stage),
            ..Self::default()
        }
    }
}

/// Deterministic stand-in for a model: recognises which stage a prompt
/// belongs to, reads the items back out of it and answers from a table.
/// Unlisted originals are translated mechanically and accepted.
#[derive(Debug, Default)]
pub struct MockBackend {
    rules: HashMap<String, MockRule>,
    reverse_order: bool,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a backend from a table of rules keyed by original text.
    pub fn from_table(rules: HashMap<String, MockRule>) -> Self {
        Self {
            rules,
            ..Self::default()
        }
    }

    pub fn with_rule(mut self, original: &str, rule: MockRule) -> Self {
        self.rules.insert(original.to_string(), rule);
        self
    }

    /// Answer arrays in reverse item order.
    pub fn reversed(mut self) -> Self {
        self.reverse_order = true;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn translation_of(original: &str) -> String {
        format!("[译] {original}")
    }

    pub fn refinement_of(translation: &str) -> String {
        format!("{translation} [润色]")
    }

    fn stage_of(user: &str) -> Option<Stage> {
        let head = |t: &str| t.split(' ').take(4).collect::<Vec<_>>().join(" ");
        [
            (TRANSLATE_TEMPLATE, Stage::Translate),
            (REFINE_TEMPLATE, Stage::Refine),
            (EVALUATE_TEMPLATE, Stage::Evaluate),
        ]
        .into_iter()
        .find(|(t, _)| user.starts_with(&head(t)))
        .map(|(_, s)| s)
    }

    fn answer(&self, stage: Stage, user: &str) -> Result<String> {
        let bad = || Error::Backend("mock could not read the prompt".into());
        let rows: Vec<(String, String)> = match stage {
            Stage::Translate => originals_from_translate_prompt(user)
                .ok_or_else(bad)?
                .into_iter()
                .map(|o| (o, String::new()))
                .collect(),
            Stage::Refine | Stage::Evaluate => last_fenced_array(user)
                .ok_or_else(bad)?
                .into_iter()
                .map(|v| {
                    let s = |k: &str| v.get(k).and_then(Value::as_str).map(str::to_string);
                    Ok((s("original").ok_or_else(bad)?, s("translation").ok_or_else(bad)?))
                })
                .collect::<Result<_>>()?,
        };
        if rows
            .iter()
            .any(|(o, _)| self.rules.get(o).and_then(|r| r.garbage_in) == Some(stage))
        {
            return Ok("not json".into());
        }
        let mut out: Vec<Value> = rows
            .iter()
            .map(|(o, tr)| {
                let rule = self.rules.get(o).cloned().unwrap_or_default();
                match stage {
                    Stage::Translate => json!({"original": o, "translation": Self::translation_of(o)}),
                    Stage::Refine => json!({"original": o, "translation": tr, "refined": Self::refinement_of(tr)}),
                    Stage::Evaluate => {
                        let flag = rule.flag.unwrap_or(Flag::Accept);
                        let mut v = json!({"original": o, "translation": tr, "flag": flag});
                        if let Some(r) = rule.reason {
                            v["reason"] = r.into();
                        }
                        if let Some(c) = rule.corrected {
                            v["correctedTranslation"] = c.into();
                        }
                        v
                    }
                }
            })
            .collect();
        if self.reverse_order {
            out.reverse();
        }
        Ok(format!("```json\n{}\n```", serde_json::to_string_pretty(&out)?))
    }
}

impl LlmBackend for MockBackend {
    fn complete(&self, _system_prompt: &str, user_prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let stage = Self::stage_of(user_prompt).ok_or_else(|| Error::Backend("mock: unrecognised prompt".into()))?;
        self.answer(stage, user_prompt)
    }
}
