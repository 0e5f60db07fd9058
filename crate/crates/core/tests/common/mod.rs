//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod cohort_rules;
pub mod experiment;
pub mod fixtures;
pub mod gradients;
pub mod masks;
pub mod metrics;
pub mod reference;
