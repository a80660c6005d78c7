//! Small oncology vocabulary backing the offline mocks.
//!
//! The lexicon tagger, the rule-based mock chat model, the lexical-overlap checker
//! and the synthetic generator all draw on these tables. None of this is meant to
//! be clinically complete; it only has to be consistent so mock pipelines produce
//! structured, matchable text.

/// Concepts a sentence can be tagged with, in score-vector order.
pub const CONCEPTS: [&str; 6] = [
    "cancer_type",
    "histology",
    "stage_at_diagnosis",
    "current_extent",
    "treatment_history",
    "biomarkers",
];

#[derive(Debug, Clone, Copy)]
pub struct CancerProfile {
    pub name: &'static str,
    /// Terms that identify this cancer in free text (lowercase).
    pub keywords: &'static [&'static str],
    pub organ: &'static str,
    pub histologies: &'static [&'static str],
    pub biomarkers: &'static [&'static str],
    pub treatments: &'static [&'static str],
}

pub const PROFILES: &[CancerProfile] = &[
    CancerProfile {
        name: "non-small cell lung cancer",
        keywords: &["non-small cell lung cancer", "lung cancer", "nsclc", "lung"],
        organ: "Lung",
        histologies: &["adenocarcinoma", "squamous cell carcinoma"],
        biomarkers: &["EGFR mutation", "ALK rearrangement", "KRAS G12C mutation", "PD-L1 expression"],
        treatments: &["carboplatin", "pemetrexed", "pembrolizumab", "osimertinib", "alectinib", "sotorasib", "docetaxel"],
    },
    CancerProfile {
        name: "breast cancer",
        keywords: &["breast cancer", "breast"],
        organ: "Breast",
        histologies: &["invasive ductal carcinoma", "invasive lobular carcinoma"],
        biomarkers: &["HER2 amplification", "estrogen receptor expression", "PIK3CA mutation", "BRCA1 mutation"],
        treatments: &["trastuzumab", "letrozole", "palbociclib", "paclitaxel", "alpelisib", "olaparib", "tamoxifen"],
    },
    CancerProfile {
        name: "colorectal cancer",
        keywords: &["colorectal cancer", "colon cancer", "rectal cancer", "colorectal", "colon"],
        organ: "Bowel",
        histologies: &["adenocarcinoma", "mucinous adenocarcinoma"],
        biomarkers: &["KRAS mutation", "BRAF V600E mutation", "microsatellite instability"],
        treatments: &["FOLFOX", "bevacizumab", "cetuximab", "encorafenib", "capecitabine"],
    },
    CancerProfile {
        name: "prostate cancer",
        keywords: &["prostate cancer", "prostate"],
        organ: "Prostate",
        histologies: &["acinar adenocarcinoma"],
        biomarkers: &["BRCA2 mutation", "AR-V7 expression"],
        treatments: &["enzalutamide", "abiraterone", "docetaxel", "leuprolide", "olaparib"],
    },
    CancerProfile {
        name: "melanoma",
        keywords: &["melanoma"],
        organ: "Skin",
        histologies: &["cutaneous melanoma", "acral melanoma"],
        biomarkers: &["BRAF V600E mutation", "NRAS mutation"],
        treatments: &["nivolumab", "ipilimumab", "dabrafenib", "trametinib"],
    },
    CancerProfile {
        name: "pancreatic cancer",
        keywords: &["pancreatic cancer", "pancreatic", "pancreas"],
        organ: "Pancreas",
        histologies: &["ductal adenocarcinoma"],
        biomarkers: &["KRAS mutation", "BRCA2 mutation"],
        treatments: &["FOLFIRINOX", "gemcitabine", "nab-paclitaxel"],
    },
    CancerProfile {
        name: "ovarian cancer",
        keywords: &["ovarian cancer", "ovarian", "fallopian tube"],
        organ: "Ovary/Fallopian Tube",
        histologies: &["high-grade serous carcinoma", "clear cell carcinoma"],
        biomarkers: &["BRCA1 mutation", "homologous recombination deficiency"],
        treatments: &["carboplatin", "paclitaxel", "olaparib", "niraparib", "bevacizumab"],
    },
    CancerProfile {
        name: "bladder cancer",
        keywords: &["bladder cancer", "urothelial", "bladder"],
        organ: "Bladder/Urinary Tract",
        histologies: &["urothelial carcinoma"],
        biomarkers: &["FGFR3 alteration", "PD-L1 expression"],
        treatments: &["cisplatin", "gemcitabine", "enfortumab vedotin", "erdafitinib", "pembrolizumab"],
    },
];

pub const BURDENS: &[&str] = &["metastatic", "locally advanced", "localized"];

pub const SCAN_TYPES: &[&str] = &[
    "CT chest abdomen pelvis",
    "PET-CT",
    "MRI brain",
    "bone scan",
];

/// Keyword lists per concept, aligned with [`CONCEPTS`].
pub fn concept_keywords(concept: usize) -> &'static [&'static str] {
    const CANCER_TYPE: &[&str] = &[
        "cancer", "carcinoma", "malignancy", "neoplasm", "tumor", "melanoma", "nsclc",
        "lymphoma", "leukemia", "sarcoma",
    ];
    const HISTOLOGY: &[&str] = &[
        "adenocarcinoma", "squamous", "ductal", "lobular", "serous", "urothelial", "histology",
        "mucinous", "acinar", "clear cell", "cutaneous", "acral", "well differentiated",
        "poorly differentiated", "moderately differentiated", "gleason",
    ];
    const STAGE: &[&str] = &["stage", "staging", "tnm", "pt1", "pt2", "pt3", "pt4", "t1", "t2", "t3", "t4", "n0", "n1", "n2", "m0", "m1"];
    const EXTENT: &[&str] = &[
        "metastatic", "metastasis", "metastases", "metastatic disease", "recurrence",
        "recurrent", "progression", "progressed", "locally advanced", "localized",
        "no evidence of disease", "lesion", "lesions", "lymphadenopathy", "nodule", "nodules",
    ];
    const TREATMENT: &[&str] = &[
        "chemotherapy", "radiation", "radiotherapy", "surgery", "resection", "lobectomy",
        "mastectomy", "lumpectomy", "prostatectomy", "cycle", "cycles", "immunotherapy",
        "treated", "received", "started", "carboplatin", "pemetrexed", "pembrolizumab",
        "osimertinib", "alectinib", "sotorasib", "docetaxel", "trastuzumab", "letrozole",
        "palbociclib", "paclitaxel", "alpelisib", "olaparib", "tamoxifen", "folfox",
        "bevacizumab", "cetuximab", "encorafenib", "capecitabine", "enzalutamide",
        "abiraterone", "leuprolide", "nivolumab", "ipilimumab", "dabrafenib", "trametinib",
        "folfirinox", "gemcitabine", "nab-paclitaxel", "niraparib", "cisplatin",
        "enfortumab vedotin", "erdafitinib",
    ];
    const BIOMARKERS: &[&str] = &[
        "mutation", "amplification", "rearrangement", "fusion", "expression", "pd-l1", "ngs",
        "sequencing", "msi", "microsatellite", "tmb", "her2", "egfr", "alk", "kras", "braf",
        "brca1", "brca2", "pik3ca", "nras", "fgfr3", "ar-v7", "estrogen receptor",
        "homologous recombination",
    ];
    match concept {
        0 => CANCER_TYPE,
        1 => HISTOLOGY,
        2 => STAGE,
        3 => EXTENT,
        4 => TREATMENT,
        5 => BIOMARKERS,
        _ => &[],
    }
}

/// Case-insensitive term search requiring non-alphanumeric characters (or the
/// string edge) on both sides of the match. `haystack` must already be lowercase.
pub fn contains_term(haystack: &str, term: &str) -> bool {
    let term = term.to_lowercase();
    if term.is_empty() {
        return false;
    }
    let bytes = haystack.as_bytes();
    let mut start = 0;
    while let Some(pos) = haystack[start..].find(&term) {
        let begin = start + pos;
        let end = begin + term.len();
        let left_ok = begin == 0 || !bytes[begin - 1].is_ascii_alphanumeric();
        let right_ok = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if left_ok && right_ok {
            return true;
        }
        start = begin + 1;
        while !haystack.is_char_boundary(start) {
            start += 1;
        }
    }
    false
}

/// The profile whose keywords appear earliest-listed in `text`, if any.
///
/// Profiles are scanned in table order and the first keyword hit wins, so
/// "non-small cell lung cancer" resolves to the lung profile before "cancer"
/// could match anything generic.
pub fn detect_cancer(text: &str) -> Option<&'static CancerProfile> {
    let lower = text.to_lowercase();
    PROFILES
        .iter()
        .find(|p| p.keywords.iter().any(|k| contains_term(&lower, k)))
}

/// Every profile mentioned in `text`, in table order.
pub fn detect_cancers(text: &str) -> Vec<&'static CancerProfile> {
    let lower = text.to_lowercase();
    PROFILES
        .iter()
        .filter(|p| p.keywords.iter().any(|k| contains_term(&lower, k)))
        .collect()
}

pub fn profile_by_name(name: &str) -> Option<&'static CancerProfile> {
    let lower = name.to_lowercase();
    PROFILES
        .iter()
        .find(|p| p.name == lower)
        .or_else(|| detect_cancer(name))
}

/// All known biomarker terms mentioned in `text` (deduplicated, first-seen order).
pub fn detect_biomarkers(text: &str) -> Vec<&'static str> {
    let lower = text.to_lowercase();
    let mut out: Vec<&'static str> = Vec::new();
    for p in PROFILES {
        for b in p.biomarkers {
            if !out.contains(b) && contains_term(&lower, b) {
                out.push(b);
            }
        }
    }
    out
}

pub fn detect_treatments(text: &str) -> Vec<&'static str> {
    let lower = text.to_lowercase();
    let mut out: Vec<&'static str> = Vec::new();
    for p in PROFILES {
        for t in p.treatments {
            if !out.contains(t) && contains_term(&lower, t) {
                out.push(t);
            }
        }
    }
    out
}

pub fn detect_histology(text: &str) -> Option<&'static str> {
    let lower = text.to_lowercase();
    // Longer names first so "ductal adenocarcinoma" wins over "adenocarcinoma".
    let mut all: Vec<&'static str> = PROFILES.iter().flat_map(|p| p.histologies.iter().copied()).collect();
    all.sort_by_key(|h| std::cmp::Reverse(h.len()));
    all.into_iter().find(|h| contains_term(&lower, h))
}

pub fn detect_burden(text: &str) -> Option<&'static str> {
    let lower = text.to_lowercase();
    if contains_term(&lower, "metastatic") || contains_term(&lower, "metastases") || contains_term(&lower, "metastasis") {
        Some("metastatic")
    } else if contains_term(&lower, "locally advanced") {
        Some("locally advanced")
    } else if contains_term(&lower, "localized") || contains_term(&lower, "early stage") {
        Some("localized")
    } else {
        None
    }
}
