use trialmatch::datamodel::SpaceField;
use trialmatch::hashing::sha256_hex;
use trialmatch::llm::parse::parse_concept_tags;
use trialmatch::llm::{parse_decision, parse_organ, parse_space_list, spaces_from_items, OrganLabel, TemplateId};

struct SpaceCase {
    name: &'static str,
    text: &'static str,
    count: usize,
    check: fn(&[trialmatch::llm::ParsedSpace]),
}

fn no_check(_: &[trialmatch::llm::ParsedSpace]) {}

const SPACE_CASES: &[SpaceCase] = &[
    SpaceCase {
        name: "single full item",
        text: "1. Cancer type allowed: breast cancer. Histology allowed: invasive ductal carcinoma. Cancer burden allowed: metastatic disease. Prior treatment required: CDK4/6 inhibitor. Prior treatment excluded: fulvestrant. Biomarkers required: ER-positive, HER2-negative.",
        count: 1,
        check: |s| {
            assert_eq!(s[0].field(SpaceField::CancerTypeAllowed), Some("breast cancer"));
            assert_eq!(s[0].field(SpaceField::HistologyAllowed), Some("invasive ductal carcinoma"));
            assert_eq!(s[0].field(SpaceField::CancerBurdenAllowed), Some("metastatic disease"));
            assert_eq!(s[0].field(SpaceField::PriorTreatmentRequired), Some("CDK4/6 inhibitor"));
            assert_eq!(s[0].field(SpaceField::PriorTreatmentExcluded), Some("fulvestrant"));
            assert_eq!(s[0].field(SpaceField::BiomarkersRequired), Some("ER-positive, HER2-negative"));
        },
    },
    SpaceCase {
        name: "multi space",
        text: "1. Cancer type allowed: non-small cell lung cancer. Biomarkers required: EGFR mutation.\n2. Cancer type allowed: non-small cell lung cancer. Biomarkers required: ALK fusion.\n3. Cancer type allowed: any solid tumor.",
        count: 3,
        check: |s| {
            assert_eq!(s[1].number, 2);
            assert_eq!(s[1].field(SpaceField::BiomarkersRequired), Some("ALK fusion"));
            assert_eq!(s[2].field(SpaceField::CancerTypeAllowed), Some("any solid tumor"));
        },
    },
    SpaceCase {
        name: "missing fields stay empty",
        text: "1. Cancer type allowed: melanoma. Prior treatment required: anti-PD-1 therapy.",
        count: 1,
        check: |s| {
            assert_eq!(s[0].field(SpaceField::HistologyAllowed), None);
            assert_eq!(s[0].field(SpaceField::BiomarkersRequired), None);
            assert_eq!(s[0].field(SpaceField::PriorTreatmentRequired), Some("anti-PD-1 therapy"));
        },
    },
    SpaceCase {
        name: "unstated values dropped",
        text: "1. Cancer type allowed: prostate cancer. Biomarkers required: none. Histology allowed: not specified.",
        count: 1,
        check: |s| {
            assert_eq!(s[0].field(SpaceField::BiomarkersRequired), None);
            assert_eq!(s[0].field(SpaceField::HistologyAllowed), None);
        },
    },
    SpaceCase {
        name: "preamble ignored",
        text: "Here are the cohorts I found:\n\n1. Cancer type allowed: ovarian cancer.",
        count: 1,
        check: |s| assert_eq!(s[0].raw_text, "Cancer type allowed: ovarian cancer."),
    },
    SpaceCase {
        name: "continuation lines joined",
        text: "1. Cancer type allowed: colorectal cancer.\n   Biomarkers required: KRAS G12C\n   mutation.",
        count: 1,
        check: |s| assert_eq!(s[0].field(SpaceField::BiomarkersRequired), Some("KRAS G12C mutation")),
    },
    SpaceCase {
        name: "no list",
        text: "This trial has no extractable cohorts.",
        count: 0,
        check: no_check,
    },
    SpaceCase {
        name: "empty item skipped",
        text: "1.  \n2. Cancer type allowed: bladder cancer.",
        count: 1,
        check: |s| assert_eq!(s[0].number, 2),
    },
    SpaceCase {
        name: "plural key variants",
        text: "1. Cancer types allowed: breast cancer. Prior treatments excluded: trastuzumab. Biomarker required: HER2 amplification.",
        count: 1,
        check: |s| {
            assert_eq!(s[0].field(SpaceField::CancerTypeAllowed), Some("breast cancer"));
            assert_eq!(s[0].field(SpaceField::PriorTreatmentExcluded), Some("trastuzumab"));
            assert_eq!(s[0].field(SpaceField::BiomarkersRequired), Some("HER2 amplification"));
        },
    },
    SpaceCase {
        name: "unknown keys recorded",
        text: "1. Cancer type allowed: melanoma. Brain metastases allowed: treated only.",
        count: 1,
        check: |s| assert_eq!(s[0].unknown_keys, vec!["Brain metastases allowed".to_string()]),
    },
    SpaceCase {
        name: "first duplicate field wins",
        text: "1. Cancer type allowed: melanoma. Cancer type allowed: uveal melanoma.",
        count: 1,
        check: |s| assert_eq!(s[0].field(SpaceField::CancerTypeAllowed), Some("melanoma")),
    },
];

#[test]
fn space_list_fixtures() {
    check_space_list_fixtures();
}

pub fn check_space_list_fixtures() {
    for case in SPACE_CASES {
        let parsed = parse_space_list(case.text);
        assert_eq!(parsed.len(), case.count, "{}", case.name);
        (case.check)(&parsed);
    }
    assert!(SPACE_CASES.len() >= 10);
}

#[test]
fn duplicate_spaces_collapse_within_a_trial() {
    check_duplicate_spaces_collapse_within_a_trial();
}

pub fn check_duplicate_spaces_collapse_within_a_trial() {
    let text = "1. Cancer type allowed: melanoma.\n2. cancer type allowed:   Melanoma.\n3. Cancer type allowed: uveal melanoma.";
    let spaces = spaces_from_items("NCT01234567", parse_space_list(text));
    assert_eq!(spaces.len(), 2);
    assert_eq!(spaces[0].space_id, "NCT01234567#1");
    assert_eq!(spaces[1].space_id, "NCT01234567#2");
    assert_eq!(spaces[1].cancer_type_allowed.as_deref(), Some("uveal melanoma"));
}

#[test]
fn decision_fixtures() {
    check_decision_fixtures();
}

pub fn check_decision_fixtures() {
    let cases: &[(&str, Option<bool>)] = &[
        ("The patient fits every criterion.\nYes!", Some(true)),
        ("Biomarker mismatch. No!", Some(false)),
        ("First I thought Yes! but the prior therapy excludes it. No!", Some(false)),
        ("No! Wait, the exclusion does not apply. Final answer: Yes!", Some(true)),
        ("YES!", Some(true)),
        ("no!", Some(false)),
        ("Yes, this seems reasonable.", None),
        ("", None),
        ("The answer is Yes", None),
        ("Casino! nights", None),
    ];
    for (text, want) in cases {
        assert_eq!(parse_decision(text), *want, "{text:?}");
    }
}

#[test]
fn organ_vocabulary() {
    check_organ_vocabulary();
}

pub fn check_organ_vocabulary() {
    for label in OrganLabel::ALL {
        assert_eq!(parse_organ(label.as_str()), Some(*label));
        assert_eq!(parse_organ(&format!("  \"{}\"\n", label.as_str())), Some(*label));
    }
    for miss in ["Stomach", "lung", "Lung cancer"] {
        assert_eq!(parse_organ(miss), None, "{miss}");
    }
    // Every organ name the prompt lists parses to a label.
    let prompt = TemplateId::OncotreeOrgan.messages()[0].1;
    let listed = prompt.lines().last().unwrap();
    let names: Vec<&str> = listed.split(", ").map(str::trim).collect();
    assert_eq!(names.len(), 31);
    for n in names {
        assert!(parse_organ(n).is_some(), "{n}");
    }
}

#[test]
fn concept_tag_answers() {
    assert_eq!(parse_concept_tags("None."), Some([false; 6]));
    assert!(parse_concept_tags("cancer_type, purple").is_none());
}

const PROMPT_SHA256: &[(&str, &str)] = &[
    ("oncotree_organ.system.txt", "882f355d4f04eb9e2da2bffca3a2b910ed846525f86f32e0f129f2944e6151ee"),
    ("patient_summarization.system.txt", "5ba10b18aeedd11b26f032c1e8edb45dcd6b54d8136d2ecfea36d2a6ec9ca2ae"),
    ("patient_summarization.user.txt", "bd7a9d51adb6a1bd09e59426f5f278ac4bc09f01029bba99f5bcbdea3aca7d94"),
    ("reasonable_consideration.system.txt", "822239cb2255924fcecca4711f56d7efc13760f009f8c750a4857088d73f637d"),
    ("reasonable_consideration.user.txt", "b9290b310020d384ebc2ebb4d157185232973600473ab6664e177b126b9143ce"),
    ("space_extraction.system.txt", "dc065b16bcddc52fb6e1be038cb13d96c24ac6b573e29c96fa1adc25331f382e"),
    ("space_extraction.user.txt", "515b294f781b504c916312c53c5b7e143d77f4ec6c5f1cc2204dcf21a02d2087"),
    ("synth_history.system.txt", "375bd5ac2a3fac998ad549a84c05407d975da1ecd13ca0fffd81a4e3a3c57b7e"),
    ("synth_history.user.txt", "9528aad4806e30a84fb165fecde1da92cc61d1a6d145f924b325e4590a43ad99"),
    ("synth_imaging.system.txt", "f0f227561878826d38ec0f5ef9c9cf491ecf890453c79bb177f8b7d7065a0127"),
    ("synth_imaging.user.txt", "dfb21d6a25b6615e8fff6c97c43da0e331a2be50a0e0b3012a73c9ecf2dbece4"),
    ("synth_note.system.txt", "a8e6248278605079d7e84ac22453d405723d066da69917fba6966b47c79db3ec"),
    ("synth_note.user.txt", "1f937886c6c006c08e8426f09ec98c8440fed10d44dd7e70be64638de3a445c8"),
    ("synth_pathology.system.txt", "fffe21b78fae337eb972c616cacde47456b22a5303313affa782cfe4a294f43a"),
    ("synth_pathology.user.txt", "3a473d48ff8b66942dd19998447b57357a96bab609eadf9105c75c4ef3f23613"),
];

#[test]
fn prompt_resources_match_pinned_checksums() {
    check_prompt_resources_match_pinned_checksums();
}

pub fn check_prompt_resources_match_pinned_checksums() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/prompts/v1");
    for (file, want) in PROMPT_SHA256 {
        let bytes = std::fs::read(dir.join(file)).unwrap();
        assert_eq!(sha256_hex(&bytes), *want, "{file}");
    }
}

#[test]
fn compiled_templates_are_the_resource_files() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/prompts/v1");
    for id in TemplateId::ALL {
        for (role, text) in id.messages() {
            let suffix = match role {
                trialmatch::llm::ChatRole::System => "system",
                _ => "user",
            };
            let on_disk = std::fs::read_to_string(dir.join(format!("{}.{suffix}.txt", id.as_str()))).unwrap();
            assert_eq!(*text, on_disk, "{id}");
        }
    }
}

#[test]
fn reasonable_consideration_renders_in_order() {
    let b = trialmatch::llm::bindings([("trial_summary", "TRIAL"), ("patient_summary", "PATIENT")]);
    let messages = trialmatch::llm::render_prompt(TemplateId::ReasonableConsideration, &b).unwrap();
    assert_eq!(messages.len(), 2);
    let user = &messages[1].content;
    assert!(user.starts_with("Here is a summary of the clinical trial:\nTRIAL\nHere is a summary of the patient:\nPATIENTBase your judgment"));
    assert!(user.ends_with("final one-word answer."));
}
