//! Core library for the perovskite additive screening toolkit.
//!
//! The crate covers the full loop we run when mining additive candidates out
//! of the literature and a vendor compound catalog:
//!
//! 1. [`corpus`] slices harvested articles into overlapping token-budgeted
//!    chunks suitable for downstream question generation.
//! 2. [`compounds`] parses and validates the candidate library (CAS registry
//!    checks included) and deals it into seeded groups.
//! 3. [`prompts`] renders the structured screening prompt and the two
//!    question-generation prompts.
//! 4. [`gateway`] talks to a chat-completions endpoint, with caching,
//!    retries, bounded parallelism and a fully offline mock backend.
//! 5. [`dataset`] turns model replies into instruction-tuning records and
//!    emits the fine-tune manifest.
//! 6. [`screening`] runs the multi-round elimination tournament over the
//!    library, journaling every step so a crashed run can be resumed.
//! 7. [`benchmark`] scores a model against a tiered QA set with an
//!    LLM-as-judge rubric.
//! 8. [`analytics`] provides term statistics, TF-IDF and a small exact t-SNE
//!    for corpus inspection plots.
//!
//! Everything is deterministic given a seed and runs without network access
//! when the mock backend is selected.

pub mod analytics;
pub mod benchmark;
pub mod compounds;
pub mod corpus;
pub mod dataset;
pub mod gateway;
pub mod prompts;
pub mod screening;
pub mod tokenize;
