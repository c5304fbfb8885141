//! Open few-shot continual relation extraction.
//!
//! The crate covers the whole pipeline:
//!
//! - [`dataset`]: open dataset construction (NER, entity merging, exhaustive
//!   pair enumeration with determined/undetermined labels) and episodic task
//!   stream sampling.
//! - [`gateway`]: LLM-backed open information extraction and description
//!   generation with a content-addressed cache and a scripted offline mock.
//! - [`encoding`]: cloze template construction and a toy encoder with full
//!   analytic gradients.
//! - [`objectives`]: hardest-triplet soft-margin loss, bilinear description
//!   scores, class-balanced weights and the weighted mutual-information loss.
//! - [`trainer`]: the per-task continual procedure (train, memory selection,
//!   prototypes, replay).
//! - [`eval`]: nearest-class-mean prediction, the OIE null filter and metrics.
//! - [`pipeline`]: end-to-end orchestration with a run manifest.

pub mod config;
pub mod data;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod objectives;
pub mod pipeline;
pub mod tokenize;
pub mod trainer;

pub use config::ExperimentConfig;
pub use data::{
    ContinualState, EntitySpan, Instance, InstanceKind, Origin, RelationId, RelationInfo,
    SpanSource, TaskDataset, TaskStream,
};
pub use error::{Error, Result};
