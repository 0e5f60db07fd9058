//! Note encoder pretraining, per-note embeddings, temporal aggregation over
//! ordered notes, cohort curation and the evaluation harness.

pub mod aggregator;
pub mod cohort;
pub mod config;
pub mod container;
pub mod encoder;
pub mod harness;
pub mod note_repr;
pub mod numerics;
pub mod text;
