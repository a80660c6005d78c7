//! Versioned chat prompt templates.
//!
//! Templates live under `prompts/v1/` as `<id>.system.txt` / `<id>.user.txt` and are
//! compiled in. Placeholders are written `{{name}}`; rendering substitutes each
//! exactly once, in a single pass, and performs no other transformation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatRole, LlmError};

pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    SpaceExtraction,
    PatientSummarization,
    ReasonableConsideration,
    OncotreeOrgan,
    SynthNote,
    SynthImaging,
    SynthPathology,
    SynthHistory,
    /// Sentence-level concept tagging used to label tagger training data.
    SentenceTagging,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::SpaceExtraction,
        TemplateId::PatientSummarization,
        TemplateId::ReasonableConsideration,
        TemplateId::OncotreeOrgan,
        TemplateId::SynthNote,
        TemplateId::SynthImaging,
        TemplateId::SynthPathology,
        TemplateId::SynthHistory,
        TemplateId::SentenceTagging,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::SpaceExtraction => "space_extraction",
            TemplateId::PatientSummarization => "patient_summarization",
            TemplateId::ReasonableConsideration => "reasonable_consideration",
            TemplateId::OncotreeOrgan => "oncotree_organ",
            TemplateId::SynthNote => "synth_note",
            TemplateId::SynthImaging => "synth_imaging",
            TemplateId::SynthPathology => "synth_pathology",
            TemplateId::SynthHistory => "synth_history",
            TemplateId::SentenceTagging => "sentence_tagging",
        }
    }

    /// Raw (role, template text) pairs in message order.
    pub fn messages(self) -> &'static [(ChatRole, &'static str)] {
        macro_rules! tpl {
            ($name:literal) => {
                include_str!(concat!("../../prompts/v1/", $name))
            };
        }
        use ChatRole::{System, User};
        match self {
            TemplateId::SpaceExtraction => &[
                (System, tpl!("space_extraction.system.txt")),
                (User, tpl!("space_extraction.user.txt")),
            ],
            TemplateId::PatientSummarization => &[
                (System, tpl!("patient_summarization.system.txt")),
                (User, tpl!("patient_summarization.user.txt")),
            ],
            TemplateId::ReasonableConsideration => &[
                (System, tpl!("reasonable_consideration.system.txt")),
                (User, tpl!("reasonable_consideration.user.txt")),
            ],
            TemplateId::OncotreeOrgan => &[(System, tpl!("oncotree_organ.system.txt"))],
            TemplateId::SynthNote => &[
                (System, tpl!("synth_note.system.txt")),
                (User, tpl!("synth_note.user.txt")),
            ],
            TemplateId::SynthImaging => &[
                (System, tpl!("synth_imaging.system.txt")),
                (User, tpl!("synth_imaging.user.txt")),
            ],
            TemplateId::SynthPathology => &[
                (System, tpl!("synth_pathology.system.txt")),
                (User, tpl!("synth_pathology.user.txt")),
            ],
            TemplateId::SynthHistory => &[
                (System, tpl!("synth_history.system.txt")),
                (User, tpl!("synth_history.user.txt")),
            ],
            TemplateId::SentenceTagging => &[
                (System, tpl!("sentence_tagging.system.txt")),
                (User, tpl!("sentence_tagging.user.txt")),
            ],
        }
    }

    /// The documented placeholder set.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::SpaceExtraction => &["trial"],
            TemplateId::PatientSummarization => &["the_patient"],
            TemplateId::ReasonableConsideration => &["trial_summary", "patient_summary"],
            TemplateId::OncotreeOrgan => &["txt"],
            TemplateId::SynthNote | TemplateId::SynthPathology | TemplateId::SynthHistory => {
                &["cancer_type"]
            }
            TemplateId::SynthImaging => &["cancer_type", "scan_type"],
            TemplateId::SentenceTagging => &["sentence"],
        }
    }

    /// Output-length bound used as the default decoding limit.
    pub fn max_output_tokens(self) -> u32 {
        match self {
            TemplateId::ReasonableConsideration => 1024,
            TemplateId::OncotreeOrgan | TemplateId::SentenceTagging => 32,
            TemplateId::SpaceExtraction | TemplateId::PatientSummarization => 2048,
            _ => 4096,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| LlmError::InvalidArgument(format!("unknown template {s:?}")))
    }
}

pub type Bindings = BTreeMap<String, String>;

pub fn bindings<const N: usize>(pairs: [(&str, &str); N]) -> Bindings {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Placeholder names appearing in `text`, in order of appearance.
pub fn placeholders_in(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                out.push(&after[..close]);
                rest = &after[close + 2..];
            }
            None => break,
        }
    }
    out
}

fn substitute(text: &str, bindings: &Bindings) -> Result<String, LlmError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after
            .find("}}")
            .ok_or_else(|| LlmError::InvalidArgument("unterminated placeholder".into()))?;
        let name = &after[..close];
        let value = bindings
            .get(name)
            .ok_or_else(|| LlmError::InvalidArgument(format!("missing binding for placeholder {name:?}")))?;
        out.push_str(value);
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders a template into chat messages.
///
/// Fails if a placeholder has no binding or a binding names no placeholder.
pub fn render_prompt(id: TemplateId, bindings: &Bindings) -> Result<Vec<ChatMessage>, LlmError> {
    if let Some(extra) = bindings
        .keys()
        .find(|k| !id.placeholders().contains(&k.as_str()))
    {
        return Err(LlmError::InvalidArgument(format!(
            "binding {extra:?} is not a placeholder of {id}"
        )));
    }
    id.messages()
        .iter()
        .map(|(role, text)| {
            Ok(ChatMessage {
                role: *role,
                content: substitute(text, bindings)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_sets_match_resources() {
        for id in TemplateId::ALL {
            let mut found: Vec<&str> = id
                .messages()
                .iter()
                .flat_map(|(_, t)| placeholders_in(t))
                .collect();
            found.sort();
            found.dedup();
            let mut documented = id.placeholders().to_vec();
            documented.sort();
            assert_eq!(found, documented, "{id}");
        }
    }

    #[test]
    fn extraction_user_message() {
        let m = render_prompt(TemplateId::SpaceExtraction, &bindings([("trial", "T")])).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].role, ChatRole::User);
        assert!(m[1].content.contains("Here is a clinical trial document: \nT\n"));
    }

    #[test]
    fn summarization_user_message() {
        let m = render_prompt(TemplateId::PatientSummarization, &bindings([("the_patient", "E")])).unwrap();
        assert!(m[1].content.starts_with("The excerpt is:\nE"));
    }

    #[test]
    fn empty_binding_still_renders() {
        let m = render_prompt(
            TemplateId::ReasonableConsideration,
            &bindings([("trial_summary", ""), ("patient_summary", "P")]),
        )
        .unwrap();
        assert!(m[1].content.starts_with("Here is a summary of the clinical trial:\n\nHere is a summary of the patient:\nP"));
    }

    #[test]
    fn missing_binding_names_placeholder() {
        let err = render_prompt(TemplateId::SynthImaging, &bindings([("cancer_type", "x")])).unwrap_err();
        assert!(err.to_string().contains("scan_type"), "{err}");
    }

    #[test]
    fn extra_binding_rejected() {
        let err = render_prompt(TemplateId::OncotreeOrgan, &bindings([("txt", "x"), ("foo", "y")])).unwrap_err();
        assert!(err.to_string().contains("foo"));
    }

    #[test]
    fn values_are_not_reexpanded() {
        let m = render_prompt(TemplateId::OncotreeOrgan, &bindings([("txt", "{{txt}}")])).unwrap();
        assert!(m[0].content.contains("parse:\n{{txt}}\nBelow"));
    }

    #[test]
    fn history_prompt_names_cancer_type() {
        let m = render_prompt(TemplateId::SynthHistory, &bindings([("cancer_type", "lung cancer")])).unwrap();
        assert!(m[1].content.contains("The cancer type is lung cancer"));
    }
}
