//! Evaluation harness for object coreference resolution in situated
//! task-oriented dialogue.
//!
//! The pipeline: a corpus of multi-turn dialogues grounded in object scenes
//! is turned into per-utterance evaluation units ([`corpus`]), each unit is
//! rendered into a prompt under a configurable (mode, ablation, metadata
//! representation) setting ([`promptkit`], [`serialize`]), a backend produces
//! a completion ([`backends`]), the `<SOM>…<EOM>` answer is extracted
//! ([`respparse`]), and object-level precision/recall/F1 are pooled
//! ([`metrics`]). [`runner`] orchestrates resumable experiments, [`report`]
//! renders the comparison tables, [`sftexport`] emits fine-tuning data, and
//! [`synth`] generates deterministic corpora with known gold references.

pub mod backends;
pub mod corpus;
pub mod metrics;
pub mod promptkit;
pub mod report;
pub mod respparse;
pub mod runner;
pub mod serialize;
pub mod sftexport;
pub mod synth;
