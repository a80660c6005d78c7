//! Pure parsers for chat-model output.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::datamodel::SpaceField;

/// One numbered item of a space list, before trial ids are attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSpace {
    /// The number the model printed.
    pub number: u32,
    /// Item text with the number stripped and whitespace runs collapsed.
    pub raw_text: String,
    pub fields: Vec<(SpaceField, String)>,
    /// Keys of the `<Words> allowed/required/excluded:` form that map to no field.
    pub unknown_keys: Vec<String>,
}

impl ParsedSpace {
    pub fn field(&self, f: SpaceField) -> Option<&str> {
        self.fields.iter().find(|(k, _)| *k == f).map(|(_, v)| v.as_str())
    }
}

fn item_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\.\s+(.*)$").expect("static regex"))
}

fn key_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // A key starts the item or follows a sentence break, is at most five words,
    // and ends in allowed/required/excluded followed by a colon.
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)(?:^|[.;]\s+)([a-z][a-z/\-]*(?:\s+[a-z/\-]+){0,4}?\s+(?:allowed|required|excluded))\s*:",
        )
        .expect("static regex")
    })
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps a key like "Prior treatments required" to its field.
pub fn field_for_key(key: &str) -> Option<SpaceField> {
    let k = collapse_ws(&key.to_lowercase());
    Some(match k.as_str() {
        "cancer type allowed" | "cancer types allowed" => SpaceField::CancerTypeAllowed,
        "histology allowed" | "histologies allowed" => SpaceField::HistologyAllowed,
        "cancer burden allowed" => SpaceField::CancerBurdenAllowed,
        "prior treatment required" | "prior treatments required" => SpaceField::PriorTreatmentRequired,
        "prior treatment excluded" | "prior treatments excluded" => SpaceField::PriorTreatmentExcluded,
        "biomarkers required" | "biomarker required" => SpaceField::BiomarkersRequired,
        "biomarkers excluded" | "biomarker excluded" => SpaceField::BiomarkersExcluded,
        _ => return None,
    })
}

/// Values that state a concept is absent rather than giving one.
fn is_unstated(value: &str) -> bool {
    matches!(
        value.to_lowercase().as_str(),
        "" | "none" | "n/a" | "na" | "not specified" | "not mentioned" | "unspecified" | "not applicable"
    )
}

fn clean_value(v: &str) -> Option<String> {
    let v = collapse_ws(v);
    let v = v.trim().trim_end_matches(['.', ',', ';']).trim();
    if is_unstated(v) {
        None
    } else {
        Some(v.to_string())
    }
}

/// Splits one item body into key/value fields.
fn parse_fields(body: &str) -> (Vec<(SpaceField, String)>, Vec<String>) {
    let keys: Vec<(usize, usize, String)> = key_regex()
        .captures_iter(body)
        .map(|c| {
            let whole = c.get(0).expect("match");
            let key = c.get(1).expect("group");
            (whole.start(), whole.end(), key.as_str().to_string())
        })
        .collect();
    let mut fields = Vec::new();
    let mut unknown = Vec::new();
    for (i, (_, value_start, key)) in keys.iter().enumerate() {
        let value_end = keys.get(i + 1).map_or(body.len(), |next| next.0);
        let value = &body[*value_start..value_end];
        match field_for_key(key) {
            Some(f) => {
                if let Some(v) = clean_value(value) {
                    if !fields.iter().any(|(k, _)| *k == f) {
                        fields.push((f, v));
                    }
                }
            }
            None => unknown.push(collapse_ws(key)),
        }
    }
    (fields, unknown)
}

/// Parses a numbered space list.
///
/// Items start at lines of the form `N. `; following lines that are not items are
/// continuation text. Anything before the first item is ignored. Returns an empty
/// vector when no item is found.
pub fn parse_space_list(text: &str) -> Vec<ParsedSpace> {
    let mut items: Vec<(u32, String)> = Vec::new();
    for line in text.lines() {
        if let Some(c) = item_regex().captures(line) {
            let number = c[1].parse().unwrap_or(0);
            items.push((number, c[2].to_string()));
        } else if let Some((_, body)) = items.last_mut() {
            if !line.trim().is_empty() {
                body.push(' ');
                body.push_str(line.trim());
            }
        }
    }
    items
        .into_iter()
        .filter_map(|(number, body)| {
            let raw_text = collapse_ws(&body);
            if raw_text.is_empty() {
                return None;
            }
            let (fields, unknown_keys) = parse_fields(&raw_text);
            Some(ParsedSpace {
                number,
                raw_text,
                fields,
                unknown_keys,
            })
        })
        .collect()
}

/// Case-folded, whitespace-collapsed form used for within-trial deduplication.
pub fn normalize_space_text(text: &str) -> String {
    collapse_ws(&text.to_lowercase())
}

fn decision_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)!").expect("static regex"))
}

/// Polarity of the last `Yes!` / `No!` in the text, case-insensitive.
pub fn parse_decision(text: &str) -> Option<bool> {
    decision_regex()
        .captures_iter(text)
        .last()
        .map(|c| c[1].eq_ignore_ascii_case("yes"))
}

macro_rules! organ_labels {
    ($($variant:ident => $text:literal),+ $(,)?) => {
        /// Top-level organ vocabulary accepted from the organ-classification prompt.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum OrganLabel {
            $($variant),+
        }

        impl OrganLabel {
            pub const ALL: &'static [OrganLabel] = &[$(OrganLabel::$variant),+];

            /// The exact string the model is asked to output.
            pub fn as_str(self) -> &'static str {
                match self {
                    $(OrganLabel::$variant => $text),+
                }
            }
        }
    };
}

organ_labels! {
    AdrenalGland => "Adrenal Gland",
    AmpullaOfVater => "Ampulla of Vater",
    BiliaryTract => "Biliary Tract",
    BladderUrinaryTract => "Bladder/Urinary Tract",
    Bone => "Bone",
    Bowel => "Bowel",
    Breast => "Breast",
    Cervix => "Cervix",
    CnsBrain => "CNS/Brain",
    EsophagusStomach => "Esophagus/Stomach",
    Eye => "Eye",
    HeadAndNeck => "Head and Neck",
    Kidney => "Kidney",
    Liver => "Liver",
    Lung => "Lung",
    Lymphoid => "Lymphoid",
    Myeloid => "Myeloid",
    OvaryFallopianTube => "Ovary/Fallopian Tube",
    Pancreas => "Pancreas",
    Penis => "Penis",
    PeripheralNervousSystem => "Peripheral Nervous System",
    Peritoneum => "Peritoneum",
    Pleura => "Pleura",
    Prostate => "Prostate",
    Skin => "Skin",
    SoftTissue => "Soft Tissue",
    Testis => "Testis",
    Thymus => "Thymus",
    Thyroid => "Thyroid",
    Uterus => "Uterus",
    VulvaVagina => "Vulva/Vagina",
    SolidTumor => "Solid tumor",
    Multiple => "Multiple",
    NoneLabel => "None",
}

impl fmt::Display for OrganLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Exact vocabulary match after trimming whitespace and one layer of surrounding quotes.
pub fn parse_organ(text: &str) -> Option<OrganLabel> {
    let t = text.trim();
    let t = ['"', '\'', '`']
        .iter()
        .find_map(|q| t.strip_prefix(*q).and_then(|s| s.strip_suffix(*q)))
        .unwrap_or(t)
        .trim();
    OrganLabel::ALL.iter().copied().find(|o| o.as_str() == t)
}

/// Parses a sentence-tagging answer: comma-separated concept names or `none`.
///
/// Returns per-concept flags in [`crate::lexicon::CONCEPTS`] order, or `None`
/// when the answer contains anything else.
pub fn parse_concept_tags(text: &str) -> Option<[bool; 6]> {
    let t = text.trim().trim_end_matches('.');
    let mut flags = [false; 6];
    if t.eq_ignore_ascii_case("none") {
        return Some(flags);
    }
    for part in t.split(',') {
        let name = part.trim().to_lowercase();
        let idx = crate::lexicon::CONCEPTS.iter().position(|c| *c == name)?;
        flags[idx] = true;
    }
    Some(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_last_occurrence() {
        assert_eq!(parse_decision("the biomarker matches. Yes!"), Some(true));
        assert_eq!(parse_decision("No!"), Some(false));
        assert_eq!(parse_decision("Yes! ...on reflection... No!"), Some(false));
        assert_eq!(parse_decision("YES!"), Some(true));
        assert_eq!(parse_decision("yes, probably"), None);
        assert_eq!(parse_decision("Techno! music"), None);
    }

    #[test]
    fn organ_exact() {
        assert_eq!(parse_organ("Lung"), Some(OrganLabel::Lung));
        assert_eq!(parse_organ(" 'Solid tumor' "), Some(OrganLabel::SolidTumor));
        assert_eq!(parse_organ("Stomach"), None);
        assert_eq!(OrganLabel::ALL.len(), 34);
    }

    #[test]
    fn concept_tags() {
        assert_eq!(parse_concept_tags("none"), Some([false; 6]));
        assert_eq!(
            parse_concept_tags("histology, biomarkers"),
            Some([false, true, false, false, false, true])
        );
        assert_eq!(parse_concept_tags("weather"), None);
    }

    #[test]
    fn key_variants() {
        assert_eq!(field_for_key("Prior treatments required"), Some(SpaceField::PriorTreatmentRequired));
        assert_eq!(field_for_key("Brain metastases allowed"), None);
    }
}
