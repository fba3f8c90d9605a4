//! Ontology-weighted contrastive pretraining of a vitals encoder and
//! notes-to-vitals knowledge distillation, with the evaluation harness
//! around them.

pub mod cache;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod distill;
pub mod encoders;
pub mod metrics;
pub mod neighbors;
pub mod numerics;
pub mod ontology;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod similarity;
