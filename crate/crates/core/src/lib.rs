//! Few-shot information extraction with completion-style language models.
//!
//! The crate covers the whole in-context learning pipeline for named entity
//! recognition (NER) and relation extraction (RE):
//!
//! - [`corpus`]: canonical dataset records, seeded training pools and stratified test samples.
//! - [`prompt`]: three-part prompt templates, label verbalizers and the prompt-option grid.
//! - [`retrieval`]: kNN and random demonstration selection over sentence embeddings.
//! - [`backend`]: the completion contract with live, oracle, scripted and record/replay backends.
//! - [`decode`]: logit-bias maps, completion parsing and span filtering.
//! - [`calibrate`]: null-prompt contextual calibration of label probabilities.
//! - [`pipeline`]: the prediction engine tying the pieces together.
//! - [`protocol`]: leave-one-out prompt selection on the training pool only.
//! - [`evalkit`]: metrics, multi-seed aggregation, ablations and null-class studies.
//! - [`kb`]: knowledge-base construction, verification, persistence and queries.

pub mod backend;
pub mod calibrate;
pub mod corpus;
pub mod decode;
pub mod evalkit;
pub mod kb;
pub mod pipeline;
pub mod prompt;
pub mod protocol;
pub mod retrieval;
pub mod text;

pub use backend::{CompletionBackend, CompletionRequest, CompletionResponse};
pub use corpus::{DatasetSplit, Example, LabelSet, NerExample, ReExample, Task, TrainPool};
pub use pipeline::{Engine, EngineOptions, Prediction, Retrieval};
pub use prompt::{PromptConfig, PromptGrid, Template, Verbalizer};
