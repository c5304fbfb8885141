//! Open dataset construction and task-stream sampling.

mod build;
pub mod ingest;
mod ner;
mod stream;
pub mod synth;

pub use build::{
    build_open_dataset, compute_stats, enumerate_pairs, merge_entities, AnnotatedSentence, Annotation,
    DatasetStats, OpenDataset, OpenSentence,
};
pub use ner::{extract_entities, Gazetteer, NerInterface};
pub use stream::sample_task_stream;
