//! Build verified chain-of-thought training datasets from seed QA corpora.
//!
//! Stages, in pipeline order: [`corpus`] ingestion and hygiene, [`mke`]
//! knowledge extraction, [`sampler`] candidate sampling and verification,
//! [`scr`] self-corrective rewriting, [`annotator`] metadata and the quality
//! gate, [`emitter`] serialization and reports. [`eval`] holds the grading
//! harness and [`pipeline`] the checkpointed orchestration.

pub mod annotator;
pub mod audit;
pub mod corpus;
pub mod emitter;
pub mod eval;
pub mod gateway;
pub mod mke;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod scr;
pub mod template;
pub mod text;
