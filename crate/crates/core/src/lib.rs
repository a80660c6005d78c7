//! Clinical trial matching engine.
//!
//! Ranks trial spaces for patients and patients for trial spaces from free text.
//! The pipeline condenses longitudinal records to relevant sentences, summarizes
//! them with a chat model, extracts structured trial spaces from eligibility text,
//! embeds both sides into one vector space, retrieves the top candidates by cosine
//! similarity and filters them with a pair classifier.
//!
//! Every model sits behind a provider trait with a deterministic offline mock, so the
//! full pipeline runs and is testable without network access.

pub mod cascade;
pub mod condenser;
pub mod ctgov;
pub mod datamodel;
pub mod embedding;
pub mod evalkit;
pub mod hashing;
pub mod http;
pub mod index;
pub mod lexicon;
pub mod llm;
pub mod synthgen;
pub mod trainprep;

pub use cascade::{MatchCandidate, Matcher, PairChecker};
pub use datamodel::{
    assign_split, ClinicalDocument, Corpus, DocType, Enrollment, OpenWindow, PairLabel, PatientSummary,
    Split, SummaryRef, SummarySource, TrialRecord, TrialSpace,
};
pub use embedding::{cosine, EmbeddingProvider, EmbeddingVector, Embedder};
pub use index::{QueryFilter, Side, VectorIndex};
pub use llm::{LlmGateway, LlmProvider, MockLlm, TemplateId};
