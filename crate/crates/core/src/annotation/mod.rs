//! Three-stage bilingual caption annotation: translate, refine, evaluate,
//! then route each caption to the accepted set or a human review queue.

mod backend;
mod pipeline;
pub mod prompts;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use backend::{LlmBackend, LlmClient, MockBackend, MockRule, RateLimit, ReplyError, RetryPolicy};
pub use pipeline::{
    apply_review, load_groups, run_pipeline, token_caption, FailedGroup, PipelineConfig, PipelineSummary, ReviewSummary,
    ACCEPTED_FILE, FAILED_FILE, REVIEW_FILE,
};
pub use prompts::PromptSet;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Accept,
    Uncertain,
    Incorrect,
}

impl Flag {
    /// Lenient parse for model output: case and surrounding punctuation are ignored.
    pub fn parse(s: &str) -> Option<Self> {
        let t = s.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase();
        match t.as_str() {
            "accept" => Some(Self::Accept),
            "uncertain" => Some(Self::Uncertain),
            "incorrect" => Some(Self::Incorrect),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Translate,
    Refine,
    Evaluate,
}

/// One caption as it moves through the stages. Field names match the
/// JSON the prompts ask the model for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationItem {
    pub original: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub translation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<Flag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, rename = "correctedTranslation", skip_serializing_if = "Option::is_none")]
    pub corrected_translation: Option<String>,
}

impl TranslationItem {
    pub fn new(original: &str) -> Self {
        Self {
            original: original.to_string(),
            translation: String::new(),
            refined: None,
            flag: None,
            reason: None,
            corrected_translation: None,
        }
    }

    /// The latest model text before any correction: refined if present.
    pub fn current_translation(&self) -> &str {
        self.refined.as_deref().unwrap_or(&self.translation)
    }

    /// What a downstream consumer should use.
    pub fn final_translation(&self) -> &str {
        self.corrected_translation
            .as_deref()
            .unwrap_or_else(|| self.current_translation())
    }

    /// Flag-dependent field requirements.
    pub fn check_flag_fields(&self) -> std::result::Result<(), String> {
        let has = |o: &Option<String>| o.as_deref().is_some_and(|s| !s.trim().is_empty());
        match self.flag {
            Some(Flag::Uncertain) if !has(&self.reason) => Err(format!("`{}` is uncertain without a reason", self.original)),
            Some(Flag::Incorrect) if !has(&self.reason) || !has(&self.corrected_translation) => Err(format!(
                "`{}` is incorrect without both reason and correctedTranslation",
                self.original
            )),
            _ => Ok(()),
        }
    }
}

/// All captions of one motion. They travel in a single request so the
/// model can keep them consistent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionGroup {
    pub motion_id: String,
    pub items: Vec<TranslationItem>,
}

impl MotionGroup {
    pub fn new(motion_id: &str, originals: &[&str]) -> Result<Self> {
        let g = Self {
            motion_id: motion_id.to_string(),
            items: originals.iter().map(|o| TranslationItem::new(o)).collect(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Schema(format!("group `{}` has no captions", self.motion_id)));
        }
        if let Some(it) = self.items.iter().find(|it| it.original.trim().is_empty() || it.original.contains('\n')) {
            return Err(Error::Schema(format!(
                "group `{}` has an empty or multi-line caption {:?}",
                self.motion_id, it.original
            )));
        }
        Ok(())
    }
}

/// Extracts the JSON array of objects from a reply, tolerating code fences
/// and chatter around it.
fn reply_array(reply: &str) -> std::result::Result<Vec<Map<String, Value>>, ReplyError> {
    let (Some(a), Some(b)) = (reply.find('['), reply.rfind(']')) else {
        return Err(ReplyError::Malformed("no JSON array in reply".into()));
    };
    if b < a {
        return Err(ReplyError::Malformed("no JSON array in reply".into()));
    }
    let v: Vec<Value> =
        serde_json::from_str(&reply[a..=b]).map_err(|e| ReplyError::Malformed(format!("invalid JSON: {e}")))?;
    v.into_iter()
        .map(|x| match x {
            Value::Object(m) => Ok(m),
            other => Err(ReplyError::Schema(format!("array element is not an object: {other}"))),
        })
        .collect()
}

/// Pairs each item with the reply entry carrying the same original,
/// regardless of order. Duplicated originals are consumed in turn.
fn match_replies(
    items: &[TranslationItem],
    mut replies: Vec<Map<String, Value>>,
) -> std::result::Result<Vec<Map<String, Value>>, ReplyError> {
    let mut out = Vec::with_capacity(items.len());
    for it in items {
        let pos = replies
            .iter()
            .position(|r| r.get("original").and_then(Value::as_str) == Some(it.original.as_str()))
            .ok_or_else(|| ReplyError::Schema(format!("reply is missing `{}`", it.original)))?;
        out.push(replies.swap_remove(pos));
    }
    if let Some(extra) = replies.first() {
        return Err(ReplyError::Schema(format!(
            "reply has {} unexpected entries, first {:?}",
            replies.len(),
            extra.get("original")
        )));
    }
    Ok(out)
}

fn required_str(m: &Map<String, Value>, key: &str) -> std::result::Result<String, ReplyError> {
    m.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ReplyError::Schema(format!("entry {:?} lacks string field `{key}`", m.get("original"))))
}

fn optional_str(m: &Map<String, Value>, key: &str) -> Option<String> {
    m.get(key)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

/// Stage 1: initial translation of every original in the group.
pub fn stage_translate(group: &MotionGroup, client: &LlmClient, prompts: &PromptSet) -> Result<MotionGroup> {
    group.validate()?;
    let user = prompts.translate(&group.items);
    let translations = client.request(&prompts.system(), &user, |reply| {
        match_replies(&group.items, reply_array(reply)?)?
            .iter()
            .map(|m| required_str(m, "translation"))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;
    let mut g = group.clone();
    for (it, t) in g.items.iter_mut().zip(translations) {
        it.translation = t;
    }
    Ok(g)
}

/// Stage 2: adds the `refined` field.
pub fn stage_refine(group: &MotionGroup, client: &LlmClient, prompts: &PromptSet) -> Result<MotionGroup> {
    group.validate()?;
    let user = prompts.refine(&group.items);
    let refined = client.request(&prompts.system(), &user, |reply| {
        match_replies(&group.items, reply_array(reply)?)?
            .iter()
            .map(|m| required_str(m, "refined"))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;
    let mut g = group.clone();
    for (it, r) in g.items.iter_mut().zip(refined) {
        it.refined = Some(r);
    }
    Ok(g)
}

/// Stage 3: flags each pair and enforces the flag-dependent fields.
pub fn stage_evaluate(group: &MotionGroup, client: &LlmClient, prompts: &PromptSet) -> Result<MotionGroup> {
    group.validate()?;
    let user = prompts.evaluate(&group.items);
    let verdicts = client.request(&prompts.system(), &user, |reply| {
        match_replies(&group.items, reply_array(reply)?)?
            .iter()
            .map(|m| {
                let raw = required_str(m, "flag")?;
                let flag = Flag::parse(&raw).ok_or_else(|| ReplyError::Schema(format!("unknown flag {raw:?}")))?;
                Ok((flag, optional_str(m, "reason"), optional_str(m, "correctedTranslation")))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;
    let mut g = group.clone();
    for (it, (flag, reason, corrected)) in g.items.iter_mut().zip(verdicts) {
        it.flag = Some(flag);
        it.reason = reason;
        it.corrected_translation = corrected;
        it.check_flag_fields().map_err(Error::Schema)?;
    }
    Ok(g)
}
