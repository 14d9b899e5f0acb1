//! Prompt templates for the three annotation stages.
//!
//! The template files are kept verbatim. Rendering only touches the
//! interpolation slots; everything else is copied byte for byte.

use serde_json::Value;

use super::TranslationItem;
use crate::{Error, Result};

pub const SYSTEM_TEMPLATE: &str = include_str!("templates/system.txt");
pub const TRANSLATE_TEMPLATE: &str = include_str!("templates/translate.txt");
pub const REFINE_TEMPLATE: &str = include_str!("templates/refine.txt");
pub const EVALUATE_TEMPLATE: &str = include_str!("templates/evaluate.txt");

/// Language the shipped templates are written for.
pub const TEMPLATE_LANGUAGE: &str = "Chinese";

const TRANSLATE_SLOT: &str = "1. <English motion description 1>\n2. <English motion description 2>";
const REFINE_LEAD: &str = "Now, refine the following initial translations:\n\n```\n";
const FENCE_END: &str = "\n```";
const EVALUATE_DATA_HEADER: &str = "\n\n###\n\nTranslation pairs:\n\n```\n";

/// Renders prompts for one target language.
#[derive(Clone, Debug)]
pub struct PromptSet {
    target_language: String,
}

impl PromptSet {
    pub fn new(target_language: &str) -> Result<Self> {
        let t = target_language.trim();
        if t.is_empty() || t.contains('\n') {
            return Err(Error::Parameter("target language must be a single nonempty line".into()));
        }
        Ok(Self {
            target_language: t.to_string(),
        })
    }

    pub fn target_language(&self) -> &str {
        &self.target_language
    }

    fn localize(&self, template: &str) -> String {
        if self.target_language == TEMPLATE_LANGUAGE {
            template.to_string()
        } else {
            template.replace(TEMPLATE_LANGUAGE, &self.target_language)
        }
    }

    pub fn system(&self) -> String {
        self.localize(SYSTEM_TEMPLATE)
    }

    /// Numbered list of the originals in place of the two placeholder lines.
    pub fn translate(&self, items: &[TranslationItem]) -> String {
        let list = items
            .iter()
            .enumerate()
            .map(|(i, it)| format!("{}. {}", i + 1, it.original))
            .collect::<Vec<_>>()
            .join("\n");
        self.localize(TRANSLATE_TEMPLATE).replacen(TRANSLATE_SLOT, &list, 1)
    }

    /// The trailing array is replaced by the group's pairs. The `refined`
    /// field keeps its numbered placeholder for the model to fill.
    pub fn refine(&self, items: &[TranslationItem]) -> String {
        let base = self.localize(REFINE_TEMPLATE);
        let start = base.rfind(REFINE_LEAD).expect("refine template carries its data block") + REFINE_LEAD.len();
        let end = base.len() - FENCE_END.len();
        debug_assert!(base.ends_with(FENCE_END));
        let rows: Vec<Vec<(&str, Value)>> = items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                vec![
                    ("original", Value::from(it.original.as_str())),
                    ("translation", Value::from(it.translation.as_str())),
                    (
                        "refined",
                        Value::from(format!("<refined {} motion description {}>", self.target_language, i + 1)),
                    ),
                ]
            })
            .collect();
        format!("{}{}{}", &base[..start], json_array(&rows), &base[end..])
    }

    /// The template ends with the response format, so the pairs under review
    /// are appended after it.
    pub fn evaluate(&self, items: &[TranslationItem]) -> String {
        let rows: Vec<Vec<(&str, Value)>> = items
            .iter()
            .map(|it| {
                vec![
                    ("original", Value::from(it.original.as_str())),
                    ("translation", Value::from(it.current_translation())),
                ]
            })
            .collect();
        format!(
            "{}{}{}{}",
            self.localize(EVALUATE_TEMPLATE),
            EVALUATE_DATA_HEADER,
            json_array(&rows),
            FENCE_END
        )
    }
}

/// Same layout as the arrays in the templates: two-space indent, one field per line.
fn json_array(rows: &[Vec<(&str, Value)>]) -> String {
    let mut s = String::from("[\n");
    for (i, row) in rows.iter().enumerate() {
        s.push_str("  {\n");
        for (j, (k, v)) in row.iter().enumerate() {
            s.push_str("    \"");
            s.push_str(k);
            s.push_str("\": ");
            s.push_str(&v.to_string());
            if j + 1 < row.len() {
                s.push(',');
            }
            s.push('\n');
        }
        s.push_str("  }");
        if i + 1 < rows.len() {
            s.push(',');
        }
        s.push('\n');
    }
    s.push(']');
    s
}

/// Pulls the originals back out of a rendered translate prompt.
pub fn originals_from_translate_prompt(prompt: &str) -> Option<Vec<String>> {
    let start = prompt.find("English Motion Descriptions:\n\n")? + "English Motion Descriptions:\n\n".len();
    let end = start + prompt[start..].find("\n\n###")?;
    prompt[start..end]
        .lines()
        .enumerate()
        .map(|(i, line)| line.strip_prefix(&format!("{}. ", i + 1)).map(str::to_string))
        .collect()
}

/// Parses the last fenced JSON array in a rendered prompt.
pub fn last_fenced_array(prompt: &str) -> Option<Vec<Value>> {
    let body = prompt.strip_suffix(FENCE_END)?;
    let start = body.rfind("```\n")? + 4;
    serde_json::from_str(&body[start..]).ok()
}
